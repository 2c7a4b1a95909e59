//! Monte-Carlo outer box of the disturbance-invariant set of `A_K`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::BoxSet;
use crate::riccati::spectral_radius;

pub const DEFAULT_ROLLOUTS: usize = 10_000;
pub const DEFAULT_HORIZON: usize = 200;
/// Vertex enumeration is skipped above this many disturbance axes with
/// non-zero width.
const MAX_VERTEX_AXES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeApprox {
    pub z_box: BoxSet,
    pub samples_used: usize,
    pub horizon_used: usize,
    pub seed: u64,
    /// false when the envelope was still growing by more than 1 % over the
    /// last tenth of the horizon
    pub converged: bool,
    /// Envelope of the ancillary correction `K e` over the same rollouts,
    /// when a gain was supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correction_box: Option<BoxSet>,
}

impl TubeApprox {
    /// The degenerate tube `{0}`.
    pub fn zero(nx: usize) -> Self {
        Self {
            z_box: BoxSet::zeros(nx),
            samples_used: 0,
            horizon_used: 0,
            seed: 0,
            converged: true,
            correction_box: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.z_box.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TubeOptions {
    pub n_rollouts: usize,
    pub horizon: usize,
    pub seed: u64,
    pub include_vertices: bool,
    pub symmetrize: bool,
}

impl Default for TubeOptions {
    fn default() -> Self {
        Self {
            n_rollouts: DEFAULT_ROLLOUTS,
            horizon: DEFAULT_HORIZON,
            seed: 0,
            include_vertices: true,
            symmetrize: true,
        }
    }
}

/// SplitMix64 finalizer; derives independent per-task stream seeds.
pub fn stream_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone)]
struct Envelope {
    lo: Vec<f64>,
    hi: Vec<f64>,
    /// envelope as of 90 % of the horizon
    lo_early: Vec<f64>,
    hi_early: Vec<f64>,
    k_abs: Vec<f64>,
}

impl Envelope {
    fn new(nx: usize, nu: usize) -> Self {
        Self {
            lo: vec![0.0; nx],
            hi: vec![0.0; nx],
            lo_early: vec![0.0; nx],
            hi_early: vec![0.0; nx],
            k_abs: vec![0.0; nu],
        }
    }

    fn merge(mut self, other: Envelope) -> Envelope {
        for i in 0..self.lo.len() {
            self.lo[i] = self.lo[i].min(other.lo[i]);
            self.hi[i] = self.hi[i].max(other.hi[i]);
            self.lo_early[i] = self.lo_early[i].min(other.lo_early[i]);
            self.hi_early[i] = self.hi_early[i].max(other.hi_early[i]);
        }
        for j in 0..self.k_abs.len() {
            self.k_abs[j] = self.k_abs[j].max(other.k_abs[j]);
        }
        self
    }
}

fn run_rollout(
    a_k: &DMatrix<f64>,
    gain: Option<&DMatrix<f64>>,
    horizon: usize,
    env: &mut Envelope,
    mut next_w: impl FnMut(&mut DVector<f64>),
) {
    let nx = a_k.nrows();
    let early = horizon - horizon / 10;
    let mut e = DVector::<f64>::zeros(nx);
    let mut w = DVector::<f64>::zeros(nx);
    let mut scratch = DVector::<f64>::zeros(nx);
    for t in 0..horizon {
        next_w(&mut w);
        scratch.gemv(1.0, a_k, &e, 0.0);
        scratch += &w;
        std::mem::swap(&mut e, &mut scratch);
        for i in 0..nx {
            env.lo[i] = env.lo[i].min(e[i]);
            env.hi[i] = env.hi[i].max(e[i]);
        }
        if t + 1 == early {
            env.lo_early.clone_from(&env.lo);
            env.hi_early.clone_from(&env.hi);
        }
        if let Some(k) = gain {
            for j in 0..k.nrows() {
                let v: f64 = (0..nx).map(|i| k[(j, i)] * e[i]).sum();
                env.k_abs[j] = env.k_abs[j].max(v.abs());
            }
        }
    }
}

/// Vertices of `W` in lexicographic sign order, one per distinct vertex.
fn distinct_vertices(w: &BoxSet) -> Vec<Vec<f64>> {
    let axes: Vec<usize> = (0..w.dim()).filter(|&i| w.lower()[i] < w.upper()[i]).collect();
    if axes.len() > MAX_VERTEX_AXES {
        return Vec::new();
    }
    (0..1usize << axes.len())
        .map(|mask| {
            let mut v = w.lower().to_vec();
            for (bit, &i) in axes.iter().enumerate() {
                if mask >> (axes.len() - 1 - bit) & 1 == 1 {
                    v[i] = w.upper()[i];
                }
            }
            v
        })
        .collect()
}

/// Estimate `Ẑ` from uniform disturbance rollouts plus constant-vertex
/// rollouts of `e+ = A_K e + w`.
pub fn estimate_tube(
    a_k: &DMatrix<f64>,
    gain: Option<&DMatrix<f64>>,
    w: &BoxSet,
    opts: &TubeOptions,
) -> Result<TubeApprox> {
    let nx = a_k.nrows();
    if a_k.ncols() != nx {
        return Err(Error::InvalidParameter("A_K must be square".into()));
    }
    if w.dim() != nx {
        return Err(Error::DimensionMismatch {
            what: "W dimension",
            expected: nx,
            got: w.dim(),
        });
    }
    if let Some(k) = gain {
        if k.ncols() != nx {
            return Err(Error::DimensionMismatch {
                what: "gain columns",
                expected: nx,
                got: k.ncols(),
            });
        }
    }
    if opts.horizon == 0 || opts.n_rollouts == 0 {
        return Err(Error::InvalidParameter("horizon and n_rollouts must be at least 1".into()));
    }
    let rho = spectral_radius(a_k);
    if !(rho < 1.0) {
        return Err(Error::Unstable(rho));
    }
    let nu = gain.map_or(0, |k| k.nrows());
    let (lo, hi) = (w.lower().to_vec(), w.upper().to_vec());

    let mut env = (0..opts.n_rollouts)
        .into_par_iter()
        .fold(
            || Envelope::new(nx, nu),
            |mut env, r| {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(opts.seed, r as u64));
                run_rollout(a_k, gain, opts.horizon, &mut env, |wv| {
                    for i in 0..nx {
                        wv[i] = if lo[i] < hi[i] { rng.random_range(lo[i]..=hi[i]) } else { lo[i] };
                    }
                });
                env
            },
        )
        .reduce(|| Envelope::new(nx, nu), Envelope::merge);

    let mut samples = opts.n_rollouts;
    if opts.include_vertices {
        let vertices = distinct_vertices(w);
        samples += vertices.len();
        for v in &vertices {
            run_rollout(a_k, gain, opts.horizon, &mut env, |wv| wv.copy_from_slice(v));
        }
    }

    let converged = (0..nx).all(|i| {
        let grow = |late: f64, early: f64| late.abs() <= early.abs() * 1.01 + 1e-15;
        grow(env.hi[i], env.hi_early[i]) && grow(env.lo[i], env.lo_early[i])
    });
    let z_box = if opts.symmetrize {
        let half: Vec<f64> = (0..nx).map(|i| env.lo[i].abs().max(env.hi[i].abs())).collect();
        BoxSet::symmetric(&half)?
    } else {
        BoxSet::new(env.lo.clone(), env.hi.clone())?
    };
    let correction_box = gain.map(|_| BoxSet::symmetric(&env.k_abs)).transpose()?;
    Ok(TubeApprox {
        z_box,
        samples_used: samples,
        horizon_used: opts.horizon,
        seed: opts.seed,
        converged,
        correction_box,
    })
}

pub fn estimate_invariant_box(
    a_k: &DMatrix<f64>,
    w: &BoxSet,
    n_rollouts: usize,
    horizon: usize,
    seed: u64,
) -> Result<TubeApprox> {
    let opts = TubeOptions {
        n_rollouts,
        horizon,
        seed,
        ..TubeOptions::default()
    };
    estimate_tube(a_k, None, w, &opts)
}

/// `inflation·lower ≤ e ≤ inflation·upper` elementwise.
pub fn contains(tube: &TubeApprox, e: &[f64], inflation: f64) -> Result<bool> {
    if !(inflation >= 1.0) {
        return Err(Error::InvalidParameter(format!("inflation must be >= 1, got {inflation}")));
    }
    if e.len() != tube.dim() {
        return Err(Error::DimensionMismatch {
            what: "state",
            expected: tube.dim(),
            got: e.len(),
        });
    }
    let z = &tube.z_box;
    Ok(e.iter()
        .enumerate()
        .all(|(i, v)| inflation * z.lower()[i] <= *v && *v <= inflation * z.upper()[i]))
}

/// Fraction of one-step successors `A_K x + w` that stay inside
/// `inflation·Ẑ`, for `x` uniform on a random facet of `Ẑ` and `w` uniform in `W`.
pub fn invariance_probe(
    tube: &TubeApprox,
    a_k: &DMatrix<f64>,
    w: &BoxSet,
    n: usize,
    inflation: f64,
    seed: u64,
) -> Result<f64> {
    let nx = tube.dim();
    let z = &tube.z_box;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inside = 0usize;
    let mut x = DVector::<f64>::zeros(nx);
    let mut next = DVector::<f64>::zeros(nx);
    let uni = |rng: &mut ChaCha8Rng, l: f64, h: f64| if l < h { rng.random_range(l..=h) } else { l };
    for _ in 0..n {
        for i in 0..nx {
            x[i] = uni(&mut rng, z.lower()[i], z.upper()[i]);
        }
        let axis = rng.random_range(0..nx);
        x[axis] = if rng.random_bool(0.5) { z.upper()[axis] } else { z.lower()[axis] };
        next.gemv(1.0, a_k, &x, 0.0);
        for i in 0..nx {
            next[i] += uni(&mut rng, w.lower()[i], w.upper()[i]);
        }
        if contains(tube, next.as_slice(), inflation)? {
            inside += 1;
        }
    }
    Ok(inside as f64 / n as f64)
}
