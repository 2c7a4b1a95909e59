//! Nominal linear model, axis-aligned constraint boxes and constraint tightening.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadsim::QuadParams;

pub const NX: usize = 8;
pub const NU: usize = 3;

pub const PX: usize = 0;
pub const PY: usize = 1;
pub const PZ: usize = 2;
pub const VX: usize = 3;
pub const VY: usize = 4;
pub const VZ: usize = 5;
pub const ROLL: usize = 6;
pub const PITCH: usize = 7;

pub const THRUST: usize = 0;
pub const ROLL_CMD: usize = 1;
pub const PITCH_CMD: usize = 2;

pub const STATE_NAMES: [&str; NX] = ["px", "py", "pz", "vx", "vy", "vz", "roll", "pitch"];
pub const INPUT_NAMES: [&str; NU] = ["thrust", "roll_cmd", "pitch_cmd"];

/// Row-major (de)serialization for dense matrices, so config files read as
/// nested arrays.
pub mod serde_matrix {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }
}

/// Discrete-time nominal dynamics `x+ = A x + B u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtiModel {
    #[serde(rename = "A", with = "serde_matrix")]
    pub a: DMatrix<f64>,
    #[serde(rename = "B", with = "serde_matrix")]
    pub b: DMatrix<f64>,
    pub nx: usize,
    pub nu: usize,
    pub dt: f64,
}

impl LtiModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, dt: f64) -> Result<Self> {
        let nx = a.nrows();
        if nx == 0 || a.ncols() != nx {
            return Err(Error::InvalidParameter(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != nx {
            return Err(Error::DimensionMismatch {
                what: "B rows",
                expected: nx,
                got: b.nrows(),
            });
        }
        let nu = b.ncols();
        if nu == 0 {
            return Err(Error::InvalidParameter("B must have at least one column".into()));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        Ok(Self { a, b, nx, nu, dt })
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
}

/// Axis-aligned interval set. Construction rejects empty boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct BoxSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Deserialize)]
struct RawBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl TryFrom<RawBox> for BoxSet {
    type Error = Error;
    fn try_from(raw: RawBox) -> Result<Self> {
        BoxSet::new(raw.lower, raw.upper)
    }
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                what: "box bounds",
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (axis, (&l, &u)) in lower.iter().zip(&upper).enumerate() {
            if l.is_nan() || u.is_nan() || l > u {
                return Err(Error::EmptyBox { axis, lower: l, upper: u });
            }
        }
        Ok(Self { lower, upper })
    }

    /// `[-half, half]` on every axis.
    pub fn symmetric(half_widths: &[f64]) -> Result<Self> {
        Self::new(half_widths.iter().map(|h| -h).collect(), half_widths.to_vec())
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            lower: vec![0.0; dim],
            upper: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn lower_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.lower)
    }

    pub fn upper_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.upper)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    /// Index of the first violated axis, if any.
    pub fn first_violation(&self, x: &[f64]) -> Option<usize> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .position(|(v, (l, u))| !(*l <= *v && *v <= *u))
    }

    /// Elementwise inclusion `self ⊆ other`.
    pub fn is_subset_of(&self, other: &BoxSet) -> bool {
        self.dim() == other.dim()
            && (0..self.dim())
                .all(|i| other.lower[i] <= self.lower[i] && self.upper[i] <= other.upper[i])
    }

    pub fn scaled(&self, factor: f64) -> BoxSet {
        let (lo, hi): (Vec<f64>, Vec<f64>) = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| {
                let (a, b) = (l * factor, u * factor);
                (a.min(b), a.max(b))
            })
            .unzip();
        BoxSet { lower: lo, upper: hi }
    }

    /// Translate by `offset`.
    pub fn shifted(&self, offset: &[f64]) -> Result<BoxSet> {
        check_dim("box offset", self.dim(), offset.len())?;
        Ok(BoxSet {
            lower: self.lower.iter().zip(offset).map(|(l, o)| l + o).collect(),
            upper: self.upper.iter().zip(offset).map(|(u, o)| u + o).collect(),
        })
    }

    /// Intersection, or `None` when empty.
    pub fn intersect(&self, other: &BoxSet) -> Option<BoxSet> {
        if self.dim() != other.dim() {
            return None;
        }
        let lower: Vec<f64> = self.lower.iter().zip(&other.lower).map(|(a, b)| a.max(*b)).collect();
        let upper: Vec<f64> = self.upper.iter().zip(&other.upper).map(|(a, b)| a.min(*b)).collect();
        BoxSet::new(lower, upper).ok()
    }

    pub fn clamp(&self, x: &mut [f64]) -> bool {
        let mut clipped = false;
        for (v, (l, u)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            let c = v.clamp(*l, *u);
            if c != *v {
                clipped = true;
                *v = c;
            }
        }
        clipped
    }

    /// Per-axis `max(|lower|, |upper|)`.
    pub fn half_widths(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| l.abs().max(u.abs()))
            .collect()
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { what, expected, got })
    }
}

/// Stage weights `Q`, `R` and terminal weight `P`, all symmetric positive definite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    #[serde(rename = "Q", with = "serde_matrix")]
    pub q: DMatrix<f64>,
    #[serde(rename = "R", with = "serde_matrix")]
    pub r: DMatrix<f64>,
    #[serde(rename = "P", with = "serde_matrix")]
    pub p: DMatrix<f64>,
}

impl CostWeights {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, p: DMatrix<f64>) -> Result<Self> {
        check_spd(&q, "Q")?;
        check_spd(&r, "R")?;
        check_spd(&p, "P")?;
        check_dim("P size", q.nrows(), p.nrows())?;
        Ok(Self { q, r, p })
    }

    /// Diagonal `Q` and `R`; the terminal weight starts as `Q` until a DARE
    /// solution replaces it.
    pub fn from_diagonals(q_diag: &[f64], r_diag: &[f64]) -> Result<Self> {
        let q = DMatrix::from_diagonal(&DVector::from_column_slice(q_diag));
        let r = DMatrix::from_diagonal(&DVector::from_column_slice(r_diag));
        Self::new(q.clone(), r, q)
    }

    pub fn with_terminal(mut self, p: DMatrix<f64>) -> Result<Self> {
        check_spd(&p, "P")?;
        check_dim("P size", self.q.nrows(), p.nrows())?;
        self.p = p;
        Ok(self)
    }
}

fn check_spd(m: &DMatrix<f64>, name: &'static str) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::InvalidParameter(format!("{name} must be square")));
    }
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-9 * (1.0 + m.abs().max()) {
        return Err(Error::NotPositiveDefinite(name));
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite(name));
    }
    Ok(())
}

/// Forward-Euler discretization of the quadrotor linearized about hover, with
/// small-angle tilt-to-acceleration coupling and a first-order tilt lag.
///
/// State `[px, py, pz, vx, vy, vz, roll, pitch]`, input deviation from hover
/// `[thrust, roll_cmd, pitch_cmd]`.
pub fn linearize_quadrotor_hover(params: &QuadParams, dt: f64) -> Result<LtiModel> {
    params.validate()?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let g = params.gravity;
    let mut ac = DMatrix::<f64>::zeros(NX, NX);
    let mut bc = DMatrix::<f64>::zeros(NX, NU);
    for i in 0..3 {
        ac[(PX + i, VX + i)] = 1.0;
        ac[(VX + i, VX + i)] = -params.drag;
    }
    // yaw = 0: pitch tilts thrust toward +x, roll toward -y
    ac[(VX, PITCH)] = g;
    ac[(VY, ROLL)] = -g;
    ac[(ROLL, ROLL)] = -1.0 / params.tilt_tau;
    ac[(PITCH, PITCH)] = -1.0 / params.tilt_tau;
    bc[(VZ, THRUST)] = 1.0 / params.mass;
    bc[(ROLL, ROLL_CMD)] = 1.0 / params.tilt_tau;
    bc[(PITCH, PITCH_CMD)] = 1.0 / params.tilt_tau;

    let a = DMatrix::identity(NX, NX) + ac * dt;
    let b = bc * dt;
    LtiModel::new(a, b, dt)
}

/// `X ⊖ Z` for boxes.
pub fn tighten_state_box(x: &BoxSet, z: &BoxSet) -> Result<BoxSet> {
    check_dim("tube dimension", x.dim(), z.dim())?;
    let lower: Vec<f64> = x.lower.iter().zip(&z.lower).map(|(a, b)| a - b).collect();
    let upper: Vec<f64> = x.upper.iter().zip(&z.upper).map(|(a, b)| a - b).collect();
    non_empty(lower, upper, &STATE_NAMES)
}

/// `U ⊖ KZ` with the image `KZ` bounded by interval arithmetic over the box.
pub fn tighten_input_box(u: &BoxSet, k: &DMatrix<f64>, z: &BoxSet) -> Result<BoxSet> {
    check_dim("gain rows", u.dim(), k.nrows())?;
    check_dim("gain columns", z.dim(), k.ncols())?;
    let half = z.half_widths();
    let bound: Vec<f64> = (0..k.nrows())
        .map(|j| (0..k.ncols()).map(|i| k[(j, i)].abs() * half[i]).sum())
        .collect();
    shrink_symmetric(u, &bound)
}

/// `U ⊖ S` where `S` is a symmetric box bounding the ancillary correction
/// `K e` directly (for example from the tube's own rollouts).
pub fn tighten_input_box_by(u: &BoxSet, correction: &BoxSet) -> Result<BoxSet> {
    check_dim("correction dimension", u.dim(), correction.dim())?;
    shrink_symmetric(u, &correction.half_widths())
}

fn shrink_symmetric(u: &BoxSet, bound: &[f64]) -> Result<BoxSet> {
    let lower: Vec<f64> = u.lower.iter().zip(bound).map(|(l, b)| l + b).collect();
    let upper: Vec<f64> = u.upper.iter().zip(bound).map(|(h, b)| h - b).collect();
    let names: Vec<&str> = if u.dim() == NU {
        INPUT_NAMES.to_vec()
    } else {
        Vec::new()
    };
    non_empty(lower, upper, &names)
}

fn non_empty(lower: Vec<f64>, upper: Vec<f64>, names: &[&str]) -> Result<BoxSet> {
    if let Some(axis) = (0..lower.len()).find(|&i| lower[i] > upper[i]) {
        let name = if names.len() == lower.len() {
            names[axis].to_string()
        } else {
            format!("axis {axis}")
        };
        return Err(Error::InfeasibleTightening {
            axis,
            name,
            lower: lower[axis],
            upper: upper[axis],
        });
    }
    Ok(BoxSet { lower, upper })
}
