//! Attention rollout.
//!
//! Raw head-averaged attention `W` of each layer is mixed with the identity
//! to account for the residual path, `A = ½W + ½I`, and the mixed maps are
//! chained by left multiplication, `Ã_l = A_l · Ã_{l−1}` with `Ã_0 = A_0`.
//! Row 0 of `Ã_l` (the CLS token) is the attention vector the detectors
//! compare.

use ndarray::{Array1, Array2};

use crate::error::{dim_err, input_err, Result};
use crate::tape::Matrix;
use crate::vit::TransformerTrace;

/// Position of the CLS token in every token sequence.
pub const CLS_INDEX: usize = 0;

/// Residual-normalized attention of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAttention(Matrix);

impl NormalizedAttention {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutMap {
    pub matrix: Matrix,
    pub layer_index: usize,
}

/// CLS row of a rollout map, length `N+1` (the CLS self entry included).
#[derive(Clone, Debug, PartialEq)]
pub struct ClsAttentionVector(pub Array1<f64>);

impl ClsAttentionVector {
    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("contiguous")
    }

    /// Patch entries only (indices `1..=N`).
    pub fn patch_scores(&self) -> Vec<f64> {
        self.0.iter().skip(1).copied().collect()
    }
}

pub fn normalize_layer(raw: &Matrix) -> Result<NormalizedAttention> {
    let (r, c) = raw.dim();
    if r != c {
        return dim_err(format!("attention map must be square, got {r}×{c}"));
    }
    let mut a = raw * 0.5;
    for i in 0..r {
        a[[i, i]] += 0.5;
    }
    Ok(NormalizedAttention(a))
}

/// `Ã_l` for the given layer index over a stack holding layers `0..=l`.
pub fn rollout(stack: &[NormalizedAttention], layer: usize) -> Result<RolloutMap> {
    if stack.is_empty() {
        return input_err("rollout of an empty attention stack");
    }
    if layer >= stack.len() {
        return input_err(format!(
            "layer {layer} requested but the stack holds {} layers",
            stack.len()
        ));
    }
    let mut acc = stack[0].0.clone();
    for a in &stack[1..=layer] {
        if a.0.dim() != acc.dim() {
            return dim_err("attention maps of different sizes in one stack");
        }
        acc = a.0.dot(&acc);
    }
    Ok(RolloutMap {
        matrix: acc,
        layer_index: layer,
    })
}

pub fn cls_attention(map: &RolloutMap) -> Result<ClsAttentionVector> {
    if map.matrix.nrows() == 0 || map.matrix.nrows() != map.matrix.ncols() {
        return dim_err("rollout map must be a non-empty square matrix");
    }
    Ok(ClsAttentionVector(map.matrix.row(CLS_INDEX).to_owned()))
}

/// CLS rollout vectors of every layer of a trace, computed incrementally.
pub fn cls_attention_all_layers(trace: &TransformerTrace) -> Result<Vec<ClsAttentionVector>> {
    let mut out = Vec::with_capacity(trace.raw_attention.len());
    let mut acc: Option<Array2<f64>> = None;
    for raw in &trace.raw_attention {
        let a = normalize_layer(raw)?;
        let next = match acc {
            None => a.0,
            Some(prev) => a.0.dot(&prev),
        };
        out.push(ClsAttentionVector(next.row(CLS_INDEX).to_owned()));
        acc = Some(next);
    }
    Ok(out)
}

/// CLS rollout vector of one layer of a trace.
pub fn trace_cls_attention(trace: &TransformerTrace, layer: usize) -> Result<ClsAttentionVector> {
    let stack = trace
        .raw_attention
        .iter()
        .take(layer + 1)
        .map(normalize_layer)
        .collect::<Result<Vec<_>>>()?;
    cls_attention(&rollout(&stack, layer)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_stochastic(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let mut m = Array2::from_shape_fn((n, n), |_| rng.random_range(0.0..1.0));
        for mut row in m.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        m
    }

    /// Independent triple-loop product.
    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let n = a.nrows();
        let mut c = Array2::zeros((n, b.ncols()));
        for i in 0..n {
            for j in 0..b.ncols() {
                let mut s = 0.0;
                for k in 0..a.ncols() {
                    s += a[[i, k]] * b[[k, j]];
                }
                c[[i, j]] = s;
            }
        }
        c
    }

    #[test]
    fn identity_is_a_fixed_point() {
        let i = Array2::eye(5);
        assert_eq!(normalize_layer(&i).unwrap().matrix(), &i);
    }

    #[test]
    fn uniform_attention_normalization() {
        let n = 4;
        let w = Array2::from_elem((n, n), 1.0 / n as f64);
        let a = normalize_layer(&w).unwrap();
        for i in 0..n {
            for j in 0..n {
                let want = if i == j {
                    0.5 + 0.5 / n as f64
                } else {
                    0.5 / n as f64
                };
                assert!((a.matrix()[[i, j]] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn non_square_is_dimension_error() {
        assert!(matches!(
            normalize_layer(&Array2::zeros((2, 3))),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn rollout_base_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a0 = normalize_layer(&random_stochastic(&mut rng, 6)).unwrap();
        let a1 = normalize_layer(&random_stochastic(&mut rng, 6)).unwrap();
        assert_eq!(
            rollout(&[a0.clone()], 0).unwrap().matrix,
            a0.matrix().clone()
        );
        let id = normalize_layer(&Array2::eye(6)).unwrap();
        assert_eq!(
            rollout(&[id, a1.clone()], 1).unwrap().matrix,
            a1.matrix().clone()
        );
        assert!(matches!(rollout(&[], 0), Err(crate::Error::Input(_))));
    }

    #[test]
    fn rollout_matches_brute_force_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stack: Vec<_> = (0..3)
            .map(|_| normalize_layer(&random_stochastic(&mut rng, 7)).unwrap())
            .collect();
        let brute = naive_matmul(
            stack[2].matrix(),
            &naive_matmul(stack[1].matrix(), stack[0].matrix()),
        );
        let got = rollout(&stack, 2).unwrap().matrix;
        let frob = (&got - &brute).mapv(|v| v * v).sum().sqrt();
        assert!(frob < 1e-12);
    }

    #[test]
    fn cls_vector_of_identity_is_e0() {
        let map = RolloutMap {
            matrix: Array2::eye(4),
            layer_index: 0,
        };
        assert_eq!(
            cls_attention(&map).unwrap().as_slice(),
            &[1.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn cls_vector_is_row_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_stochastic(&mut rng, 5);
        let v = cls_attention(&RolloutMap {
            matrix: m.clone(),
            layer_index: 3,
        })
        .unwrap();
        for j in 0..5 {
            assert_eq!(v.0[j], m[[0, j]]);
        }
        assert!((v.0.sum() - 1.0).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn normalization_is_affine_and_stochastic(seed in 0u64..500, alpha in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w1 = random_stochastic(&mut rng, 5);
            let w2 = random_stochastic(&mut rng, 5);
            let mix = &w1 * alpha + &w2 * (1.0 - alpha);
            let lhs = normalize_layer(&mix).unwrap();
            let rhs = normalize_layer(&w1).unwrap().matrix() * alpha
                + normalize_layer(&w2).unwrap().matrix() * (1.0 - alpha);
            prop_assert!((lhs.matrix() - &rhs).iter().all(|d| d.abs() < 1e-12));
            for (i, row) in lhs.matrix().rows().into_iter().enumerate() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                prop_assert!(row[i] >= 0.5 - 1e-6);
                prop_assert!(row.iter().all(|v| *v >= 0.0));
            }
        }

        #[test]
        fn rollout_rows_stay_stochastic(seed in 0u64..200, layers in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stack: Vec<_> = (0..layers)
                .map(|_| normalize_layer(&random_stochastic(&mut rng, 9)).unwrap())
                .collect();
            for l in 0..layers {
                let m = rollout(&stack, l).unwrap().matrix;
                for row in m.rows() {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-4);
                }
            }
        }
    }
}
