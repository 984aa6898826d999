//! Dense tensors and a reverse-mode tape.
//!
//! Values are `f64` throughout so that simulated quantization is the only
//! low-precision effect in play. Every op checks its output for NaN/Inf and
//! fails instead of propagating them.

mod gemm;
mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use tape::{GemmQuant, Gradients, QuantOperands, Tape, Var};
pub use tensor::Tensor;

pub(crate) use gemm::{gemm, gemm_into, Mat};

use thiserror::Error;

use crate::fpquant::{fake_quant, QuantConfig, QuantError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected rank {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("non-finite value produced by {op} at element {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("slice {slice} has norm {norm:e}, below the normalization guard")]
    ZeroNorm { slice: usize, norm: f64 },
    #[error("index {index} out of range for {op} (size {size})")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// Norm below which normalization is treated as a bug.
pub const NORM_EPS: f64 = 1e-12;

/// Plain `a @ b` for 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    check_matmul(a, b, "matmul")?;
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let c = gemm(Mat::new(a.data(), m, k), Mat::new(b.data(), k, n));
    Tensor::new(vec![m, n], c)
}

fn check_matmul(a: &Tensor, b: &Tensor, op: &'static str) -> Result<(), TensorError> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(TensorError::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `fake_quant(a) @ fake_quant(b)` where both operands are blocked along the
/// contraction axis (`a` along its rows, `b` along its columns). `None`
/// disables quantization.
pub fn quant_matmul(
    a: &Tensor,
    b: &Tensor,
    cfg: Option<&QuantConfig>,
) -> Result<Tensor, TensorError> {
    check_matmul(a, b, "quant_matmul")?;
    match cfg {
        None => matmul(a, b),
        Some(cfg) => {
            let a_hat = fake_quant(a, cfg)?;
            let b_hat = fake_quant(&b.transpose()?, cfg)?.transpose()?;
            matmul(&a_hat, &b_hat)
        }
    }
}

/// Unit-normalize every slice along `axis` of a 2-D tensor.
pub fn row_normalize(t: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
    if t.shape().len() != 2 || axis > 1 {
        return Err(TensorError::Rank {
            expected: 2,
            shape: t.shape().to_vec(),
        });
    }
    let mut out = t.clone();
    normalize_in_place(&mut out, axis)?;
    Ok(out)
}

/// In-place variant of [`row_normalize`].
pub fn normalize_in_place(t: &mut Tensor, axis: usize) -> Result<(), TensorError> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let data = t.data_mut();
    if axis == 1 {
        for (i, row) in data.chunks_mut(c).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < NORM_EPS {
                return Err(TensorError::ZeroNorm { slice: i, norm: n });
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
    } else {
        for j in 0..c {
            let n = (0..r).map(|i| data[i * c + j].powi(2)).sum::<f64>().sqrt();
            if n < NORM_EPS {
                return Err(TensorError::ZeroNorm { slice: j, norm: n });
            }
            for i in 0..r {
                data[i * c + j] /= n;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = Tensor::randn(&[5, 3], 1.0, &mut rng);
        assert_eq!(matmul(&Tensor::eye(5), &b).unwrap(), b);
        assert_eq!(matmul(&b, &Tensor::eye(3)).unwrap(), b);
        let z = matmul(&Tensor::zeros(&[2, 5]), &b).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_names_both() {
        let e = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2])).unwrap_err();
        assert_eq!(
            e,
            TensorError::Shape {
                op: "matmul",
                left: vec![2, 3],
                right: vec![4, 2]
            }
        );
    }

    #[test]
    fn normalize_examples() {
        let t = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(row_normalize(&t, 1).unwrap().data(), &[0.6, 0.8]);
        let u = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(row_normalize(&u, 0).unwrap().data(), &[0.6, 0.8]);
        let unit = Tensor::matrix(1, 2, vec![0.6, 0.8]).unwrap();
        assert_eq!(row_normalize(&unit, 1).unwrap(), unit);
        assert!(matches!(
            row_normalize(&Tensor::zeros(&[2, 2]), 1),
            Err(TensorError::ZeroNorm { slice: 0, .. })
        ));
    }

    #[test]
    fn normalized_slices_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Tensor::randn(&[16, 40], 0.02, &mut rng);
        let n = row_normalize(&t, 1).unwrap();
        for i in 0..16 {
            let s: f64 = n.row(i).iter().map(|v| v * v).sum();
            assert!((s.sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quant_matmul_off_is_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[7, 32], 1.0, &mut rng);
        let b = Tensor::randn(&[32, 5], 1.0, &mut rng);
        assert_eq!(quant_matmul(&a, &b, None).unwrap(), matmul(&a, &b).unwrap());
    }

    #[test]
    fn quant_matmul_on_grid_operands_is_exact() {
        // every 16-block starts with a 6, so each block scale is exactly 1
        let grid = crate::fpquant::E2M1_MAGNITUDES;
        let mut a = Tensor::zeros(&[4, 32]);
        for (i, v) in a.data_mut().iter_mut().enumerate() {
            let sign = if i % 3 == 0 { -1.0 } else { 1.0 };
            *v = if i % 16 == 0 { 6.0 } else { sign * grid[i % 8] };
        }
        let cfg = QuantConfig {
            per_tensor_scale: false,
            ..QuantConfig::nvfp4()
        };
        let b = a.transpose().unwrap();
        assert_eq!(
            quant_matmul(&a, &b, Some(&cfg)).unwrap(),
            matmul(&a, &b).unwrap()
        );
    }
}
