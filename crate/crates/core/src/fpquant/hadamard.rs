//! Randomized Hadamard transform along the last axis.
//!
//! The last axis is cut into contiguous segments whose length is the largest
//! power of two dividing the axis length (an axis of 48 uses segments of 16,
//! an axis of 256 a single segment of 256). Each segment is multiplied by a
//! random ±1 diagonal and then by the orthonormal Walsh-Hadamard matrix.
//! The diagonal depends only on the seed and the tensor shape, so repeated
//! calls on same-shaped tensors reuse one fixed preconditioner.

use super::rounding::counter_hash;
use super::{QuantConfig, QuantError};
use crate::tensorcore::Tensor;

const SIGN_STREAM: u64 = 0x5248_5453_4947_4e53;

/// Largest power of two dividing `n` (`n > 0`).
pub fn segment_len(n: usize) -> usize {
    1 << n.trailing_zeros()
}

/// In-place unnormalized fast Walsh-Hadamard transform.
fn fwht(x: &mut [f64]) {
    let n = x.len();
    let mut h = 1;
    while h < n {
        for pair in x.chunks_exact_mut(2 * h) {
            let (lo, hi) = pair.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (u, v) = (*a, *b);
                *a = u + v;
                *b = u - v;
            }
        }
        h *= 2;
    }
}

/// Orthonormal Hadamard transform of every `segment`-long chunk of `x`.
/// The matrix is symmetric, so this is its own inverse.
pub fn hadamard_segments(x: &mut [f64], segment: usize) -> Result<(), QuantError> {
    if segment == 0 || !segment.is_power_of_two() {
        return Err(QuantError::NotPowerOfTwo {
            axis: "last",
            len: segment,
        });
    }
    if x.len() % segment != 0 {
        return Err(QuantError::NotPowerOfTwo {
            axis: "last",
            len: x.len(),
        });
    }
    let norm = 1.0 / (segment as f64).sqrt();
    for chunk in x.chunks_mut(segment) {
        fwht(chunk);
        for v in chunk.iter_mut() {
            *v *= norm;
        }
    }
    Ok(())
}

fn shape_key(shape: &[usize]) -> u64 {
    shape.iter().fold(shape.len() as u64, |h, &d| {
        counter_hash(h, d as u64, 0x9e37)
    })
}

/// The ±1 diagonal for one row of a tensor with this shape.
pub fn sign_diagonal(seed: u64, shape: &[usize]) -> Vec<f64> {
    let n = *shape.last().unwrap_or(&0);
    let key = shape_key(shape) ^ seed;
    (0..n)
        .map(|i| {
            if counter_hash(key, SIGN_STREAM, i as u64) & 1 == 0 {
                1.0
            } else {
                -1.0
            }
        })
        .collect()
}

/// Apply the randomized transform (or its inverse) to raw row-major data.
pub(crate) fn rht_rows(
    data: &mut [f64],
    shape: &[usize],
    seed: u64,
    inverse: bool,
) -> Result<(), QuantError> {
    let cols = *shape.last().ok_or(QuantError::Empty)?;
    if cols == 0 || data.is_empty() {
        return Err(QuantError::Empty);
    }
    let seg = segment_len(cols);
    let signs = sign_diagonal(seed, shape);
    for row in data.chunks_mut(cols) {
        if inverse {
            hadamard_segments(row, seg)?;
            row.iter_mut().zip(&signs).for_each(|(v, s)| *v *= s);
        } else {
            row.iter_mut().zip(&signs).for_each(|(v, s)| *v *= s);
            hadamard_segments(row, seg)?;
        }
    }
    Ok(())
}

/// Randomized Hadamard transform along the last axis of `t`, with signs
/// drawn from `cfg.seed`. `inverse` applies the adjoint.
pub fn hadamard_transform(
    t: &Tensor,
    cfg: &QuantConfig,
    inverse: bool,
) -> Result<Tensor, QuantError> {
    let mut data = t.data().to_vec();
    rht_rows(&mut data, t.shape(), cfg.seed, inverse)?;
    Ok(Tensor::new(t.shape().to_vec(), data).expect("shape unchanged"))
}
