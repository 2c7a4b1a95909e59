//! Small fully connected ReLU network, trained with Adam on mean squared error.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "tube-il-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Hidden layer widths used by the benchmark policy.
pub const HIDDEN: [usize; 2] = [32, 32];

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// out × in
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Raw network operating on already standardized inputs and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    sizes: Vec<usize>,
    layers: Vec<Layer>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            flatten_layer(l, &mut out);
        }
        out
    }
}

fn flatten_layer(l: &Layer, out: &mut Vec<f64>) {
    for r in 0..l.weights.nrows() {
        for c in 0..l.weights.ncols() {
            out.push(l.weights[(r, c)]);
        }
    }
    out.extend(l.bias.iter());
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
        return Err(Error::InvalidParameter(format!("bad layer sizes {sizes:?}")));
    }
    Ok(())
}

struct Trace {
    // activations a_0 (input) .. a_L (output); pre-activations of hidden layers
    acts: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

impl Network {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|p| Layer { weights: DMatrix::zeros(p[1], p[0]), bias: DVector::zeros(p[1]) })
            .collect();
        Ok(Network { sizes: sizes.to_vec(), layers })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut net = Network::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut net.layers {
            let (fan_out, fan_in) = l.weights.shape();
            let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for r in 0..fan_out {
                for c in 0..fan_in {
                    l.weights[(r, c)] = rng.random_range(-lim..=lim);
                }
            }
        }
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|p| p[1] * (p[0] + 1)).sum()
    }

    /// Parameters in layer order; each layer row-major weights then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            flatten_layer(l, &mut out);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch { what: "parameter vector", expected: self.n_params(), got: flat.len() });
        }
        let mut i = 0;
        for l in &mut self.layers {
            for r in 0..l.weights.nrows() {
                for c in 0..l.weights.ncols() {
                    l.weights[(r, c)] = flat[i];
                    i += 1;
                }
            }
            for b in l.bias.iter_mut() {
                *b = flat[i];
                i += 1;
            }
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { what: "network input", expected: self.input_dim(), got: input.len() });
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let mut a = DVector::from_column_slice(input);
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.weights * &a + &l.bias;
            if i < last {
                z.apply(|v| *v = v.max(0.0));
            }
            a = z;
        }
        Ok(a.as_slice().to_vec())
    }

    /// Forward pass on a batch stored column-wise (in × batch).
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.trace(x).acts.pop().unwrap()
    }

    fn trace(&self, x: &DMatrix<f64>) -> Trace {
        let last = self.layers.len() - 1;
        let mut acts = vec![x.clone()];
        let mut pre = Vec::with_capacity(last);
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.weights * acts.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &l.bias;
            }
            if i < last {
                let a = z.map(|v| v.max(0.0));
                pre.push(z);
                acts.push(a);
            } else {
                acts.push(z);
            }
        }
        Trace { acts, pre }
    }

    /// Batch loss (1/B) Σ ‖f(x_b) − y_b‖².
    pub fn loss(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
        let out = self.forward_batch(x);
        (out - y).norm_squared() / x.ncols() as f64
    }

    /// Exact gradient of the batch loss by backpropagation.
    pub fn gradient(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(f64, Gradients)> {
        if x.ncols() == 0 {
            return Err(Error::EmptyDataset);
        }
        if x.nrows() != self.input_dim() || y.nrows() != self.output_dim() || y.ncols() != x.ncols() {
            return Err(Error::DimensionMismatch { what: "batch", expected: self.input_dim(), got: x.nrows() });
        }
        let nb = x.ncols() as f64;
        let tr = self.trace(x);
        let resid = tr.acts.last().unwrap() - y;
        let loss = resid.norm_squared() / nb;
        let mut delta = resid * (2.0 / nb);
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let gw = &delta * tr.acts[i].transpose();
            let gb = DVector::from_iterator(delta.nrows(), delta.row_iter().map(|r| r.sum()));
            grads.push(Layer { weights: gw, bias: gb });
            if i > 0 {
                let mut back = self.layers[i].weights.transpose() * &delta;
                back.zip_apply(&tr.pre[i - 1], |d, z| {
                    if z <= 0.0 {
                        *d = 0.0
                    }
                });
                delta = back;
            }
        }
        grads.reverse();
        Ok((loss, Gradients { layers: grads }))
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Layer>,
    pub v: Vec<Layer>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(net: &Network, learning_rate: f64) -> Self {
        let zeros = Network::zeros(net.sizes()).unwrap().layers;
        AdamState { m: zeros.clone(), v: zeros, step: 0, learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn update(&mut self, net: &mut Network, grads: &Gradients) {
        self.step += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.learning_rate);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let upd = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        };
        for (k, l) in net.layers.iter_mut().enumerate() {
            let g = &grads.layers[k];
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..l.weights.len() {
                upd(&mut l.weights.as_mut_slice()[i], g.weights.as_slice()[i], &mut m.weights.as_mut_slice()[i], &mut v.weights.as_mut_slice()[i]);
            }
            for i in 0..l.bias.len() {
                upd(&mut l.bias[i], g.bias[i], &mut m.bias[i], &mut v.bias[i]);
            }
        }
    }
}

/// Per-feature affine standardization `(x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    /// Near-constant features keep unit scale.
    pub fn fit<'a, I>(rows: I, dim: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch { what: "standardizer row", expected: dim, got: r.len() });
            }
            n += 1;
            for i in 0..dim {
                sum[i] += r[i];
                sq[i] += r[i] * r[i];
            }
        }
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let scale = (0..dim)
            .map(|i| {
                let var = (sq[i] / nf - mean[i] * mean[i]).max(0.0);
                let sd = var.sqrt();
                if sd < 1e-8 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Standardizer { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| v * s + m).collect()
    }
}

/// Network plus the frozen input/output standardization it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpPolicy {
    pub network: Network,
    pub input_norm: Standardizer,
    pub output_norm: Standardizer,
    pub seed: u64,
}

impl MlpPolicy {
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        let network = Network::glorot(sizes, seed)?;
        let input_norm = Standardizer::identity(network.input_dim());
        let output_norm = Standardizer::identity(network.output_dim());
        Ok(MlpPolicy { network, input_norm, output_norm, seed })
    }

    /// `input -> 32 -> 32 -> output`.
    pub fn standard(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        MlpPolicy::new(&[input_dim, HIDDEN[0], HIDDEN[1], output_dim], seed)
    }

    pub fn with_normalization(mut self, input_norm: Standardizer, output_norm: Standardizer) -> Result<Self> {
        if input_norm.dim() != self.network.input_dim() {
            return Err(Error::DimensionMismatch { what: "input normalization", expected: self.network.input_dim(), got: input_norm.dim() });
        }
        if output_norm.dim() != self.network.output_dim() {
            return Err(Error::DimensionMismatch { what: "output normalization", expected: self.network.output_dim(), got: output_norm.dim() });
        }
        self.input_norm = input_norm;
        self.output_norm = output_norm;
        Ok(self)
    }

    pub fn input_dim(&self) -> usize {
        self.network.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.network.output_dim()
    }

    /// Action in physical units for a raw feature vector.
    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { what: "policy input", expected: self.input_dim(), got: features.len() });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let z = self.network.forward(&self.input_norm.apply(features))?;
        Ok(self.output_norm.invert(&z))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            layer_sizes: self.network.sizes.clone(),
            seed: self.seed,
            params: self.network.params(),
            input_norm: self.input_norm.clone(),
            output_norm: self.output_norm.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Schema(format!("unknown checkpoint format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!("unsupported checkpoint version {}", ck.version)));
        }
        let mut network = Network::zeros(&ck.layer_sizes).map_err(|e| Error::Schema(e.to_string()))?;
        network.set_params(&ck.params).map_err(|e| Error::Schema(e.to_string()))?;
        if ck.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema("non-finite parameter".into()));
        }
        let p = MlpPolicy { network, input_norm: Standardizer::identity(1), output_norm: Standardizer::identity(1), seed: ck.seed };
        p.with_normalization(ck.input_norm, ck.output_norm).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        MlpPolicy::from_checkpoint(ck)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub layer_sizes: Vec<usize>,
    pub seed: u64,
    pub params: Vec<f64>,
    pub input_norm: Standardizer,
    pub output_norm: Standardizer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 50, learning_rate: 1e-3, batch_size: 64, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidParameter("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Trains the policy network in place on (features, action) pairs given in
/// physical units; normalization already attached to the policy is used as is.
/// Returns the mean minibatch loss of every epoch (standardized units).
pub fn train(policy: &mut MlpPolicy, inputs: &[&[f64]], targets: &[&[f64]], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if inputs.len() != targets.len() {
        return Err(Error::DimensionMismatch { what: "training targets", expected: inputs.len(), got: targets.len() });
    }
    let (din, dout) = (policy.input_dim(), policy.output_dim());
    let n = inputs.len();
    let mut x = DMatrix::zeros(din, n);
    let mut y = DMatrix::zeros(dout, n);
    for j in 0..n {
        if inputs[j].len() != din {
            return Err(Error::DimensionMismatch { what: "training input", expected: din, got: inputs[j].len() });
        }
        if targets[j].len() != dout {
            return Err(Error::DimensionMismatch { what: "training target", expected: dout, got: targets[j].len() });
        }
        if inputs[j].iter().chain(targets[j].iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        x.set_column(j, &DVector::from_vec(policy.input_norm.apply(inputs[j])));
        y.set_column(j, &DVector::from_vec(policy.output_norm.apply(targets[j])));
    }
    train_standardized(&mut policy.network, &x, &y, cfg)
}

/// Adam on already standardized column-wise data.
pub fn train_standardized(net: &mut Network, x: &DMatrix<f64>, y: &DMatrix<f64>, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = x.ncols();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let batch = if cfg.batch_size == 0 { n } else { cfg.batch_size.min(n) };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(net, cfg.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let full = batch == n;
    for _ in 0..cfg.epochs {
        if !full {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(batch) {
            let (loss, g) = if full {
                net.gradient(x, y)?
            } else {
                let xb = x.select_columns(chunk.iter());
                let yb = y.select_columns(chunk.iter());
                net.gradient(&xb, &yb)?
            };
            adam.update(net, &g);
            total += loss * chunk.len() as f64;
            count += chunk.len();
        }
        trace.push(total / count as f64);
    }
    Ok(trace)
}
