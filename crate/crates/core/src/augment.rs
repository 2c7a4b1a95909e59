//! Sampling augmentation: extra state/action pairs drawn from the tube
//! around each demonstrated step and labeled by the ancillary controller.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::BoxSet;

/// Dense sampling enumerates `2^nx` vertices; refuse beyond this.
pub const MAX_DENSE_DIM: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMethod {
    /// facet centers, `2 nx` samples
    Sparse,
    /// vertices, `2^nx` samples
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedPair {
    pub state_plus: Vec<f64>,
    pub action_plus: Vec<f64>,
    pub source_step: usize,
}

/// Facet centers of `x̌₀ + Ẑ`: for each axis the upper then the lower facet.
pub fn sparse_samples(x_check0: &[f64], z_box: &BoxSet) -> Result<Vec<Vec<f64>>> {
    check(x_check0, z_box)?;
    let mut out = Vec::with_capacity(2 * x_check0.len());
    for i in 0..x_check0.len() {
        for offset in [z_box.upper()[i], z_box.lower()[i]] {
            let mut s = x_check0.to_vec();
            s[i] += offset;
            out.push(s);
        }
    }
    Ok(out)
}

/// Vertices of `x̌₀ + Ẑ` in lexicographic sign order (axis 0 most significant,
/// lower before upper).
pub fn dense_samples(x_check0: &[f64], z_box: &BoxSet) -> Result<Vec<Vec<f64>>> {
    check(x_check0, z_box)?;
    let nx = x_check0.len();
    if nx > MAX_DENSE_DIM {
        return Err(Error::SizeLimit(format!(
            "dense sampling of {nx} dimensions would emit 2^{nx} states"
        )));
    }
    Ok((0..1usize << nx)
        .map(|mask| {
            (0..nx)
                .map(|i| {
                    let upper = mask >> (nx - 1 - i) & 1 == 1;
                    x_check0[i] + if upper { z_box.upper()[i] } else { z_box.lower()[i] }
                })
                .collect()
        })
        .collect())
}

pub fn samples(method: SamplingMethod, x_check0: &[f64], z_box: &BoxSet) -> Result<Vec<Vec<f64>>> {
    match method {
        SamplingMethod::Sparse => sparse_samples(x_check0, z_box),
        SamplingMethod::Dense => dense_samples(x_check0, z_box),
    }
}

fn check(x: &[f64], z: &BoxSet) -> Result<()> {
    if x.len() != z.dim() {
        return Err(Error::DimensionMismatch {
            what: "tube dimension",
            expected: x.len(),
            got: z.dim(),
        });
    }
    Ok(())
}

/// `u⁺ = ǔ₀ + K (x⁺ − x̌₀)` for every sample. Labels are not saturated.
pub fn label_actions(
    samples: Vec<Vec<f64>>,
    u_check0: &[f64],
    gain: &DMatrix<f64>,
    x_check0: &[f64],
    source_step: usize,
) -> Result<Vec<AugmentedPair>> {
    let (nu, nx) = gain.shape();
    if u_check0.len() != nu || x_check0.len() != nx {
        return Err(Error::DimensionMismatch {
            what: "gain",
            expected: nu * nx,
            got: u_check0.len() * x_check0.len(),
        });
    }
    samples
        .into_iter()
        .map(|state_plus| {
            if state_plus.len() != nx {
                return Err(Error::DimensionMismatch {
                    what: "sample",
                    expected: nx,
                    got: state_plus.len(),
                });
            }
            let action_plus = (0..nu)
                .map(|j| {
                    u_check0[j]
                        + (0..nx)
                            .map(|i| gain[(j, i)] * (state_plus[i] - x_check0[i]))
                            .sum::<f64>()
                })
                .collect();
            Ok(AugmentedPair {
                state_plus,
                action_plus,
                source_step,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sparse_counts_and_facets() {
        let z = BoxSet::symmetric(&[0.5; 8]).unwrap();
        assert_eq!(sparse_samples(&[0.0; 8], &z).unwrap().len(), 16);
        let unit = BoxSet::symmetric(&[1.0, 1.0]).unwrap();
        let s = sparse_samples(&[0.0, 0.0], &unit).unwrap();
        assert_eq!(s, vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]);
        let s = sparse_samples(&[3.0; 4], &BoxSet::zeros(4)).unwrap();
        assert!(s.iter().all(|v| v == &vec![3.0; 4]));
    }

    #[test]
    fn dense_counts_and_order() {
        let z = BoxSet::symmetric(&[0.5; 8]).unwrap();
        assert_eq!(dense_samples(&[0.0; 8], &z).unwrap().len(), 256);
        let z1 = BoxSet::symmetric(&[2.0]).unwrap();
        assert_eq!(dense_samples(&[5.0], &z1).unwrap(), vec![vec![3.0], vec![7.0]]);
        let z2 = BoxSet::symmetric(&[1.0, 1.0]).unwrap();
        assert_eq!(dense_samples(&[0.0, 0.0], &z2).unwrap().len(), 4);
        let big = BoxSet::zeros(21);
        assert!(matches!(dense_samples(&[0.0; 21], &big), Err(Error::SizeLimit(_))));
    }

    #[test]
    fn labels() {
        let k = DMatrix::from_row_slice(1, 1, &[-0.5]);
        let p = label_actions(vec![vec![2.0]], &[1.0], &k, &[0.0], 4).unwrap();
        assert_eq!(p[0].action_plus, vec![0.0]);
        assert_eq!(p[0].source_step, 4);
        let k = DMatrix::from_row_slice(1, 2, &[0.7, -0.1]);
        let p = label_actions(vec![vec![1.0, 2.0]], &[0.3], &k, &[1.0, 2.0], 0).unwrap();
        assert_eq!(p[0].action_plus, vec![0.3]);
        let zero = DMatrix::zeros(2, 2);
        let z = BoxSet::symmetric(&[1.0, 1.0]).unwrap();
        let p = label_actions(sparse_samples(&[0.0, 0.0], &z).unwrap(), &[4.0, 5.0], &zero, &[0.0, 0.0], 0).unwrap();
        assert!(p.iter().all(|q| q.action_plus == vec![4.0, 5.0]));
    }

    proptest! {
        #[test]
        fn labels_are_affine(
            x in proptest::collection::vec(-2.0f64..2.0, 3),
            half in proptest::collection::vec(0.0f64..1.0, 3),
            kv in proptest::collection::vec(-3.0f64..3.0, 6),
            dense in any::<bool>(),
        ) {
            let z = BoxSet::symmetric(&half).unwrap();
            let k = DMatrix::from_row_slice(2, 3, &kv);
            let method = if dense { SamplingMethod::Dense } else { SamplingMethod::Sparse };
            let s = samples(method, &x, &z).unwrap();
            prop_assert_eq!(s.len(), if dense { 8 } else { 6 });
            let pairs = label_actions(s, &[1.0, -1.0], &k, &x, 0).unwrap();
            for p in &pairs {
                for i in 0..3 {
                    prop_assert!(p.state_plus[i] >= x[i] - half[i] - 1e-9 && p.state_plus[i] <= x[i] + half[i] + 1e-9);
                }
            }
            for a in &pairs {
                for b in &pairs {
                    for j in 0..2 {
                        let du = a.action_plus[j] - b.action_plus[j];
                        let kd: f64 = (0..3).map(|i| k[(j, i)] * (a.state_plus[i] - b.state_plus[i])).sum();
                        prop_assert!((du - kd).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
