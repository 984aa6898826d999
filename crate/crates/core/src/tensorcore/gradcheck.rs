//! Finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Coordinates sampled per parameter tensor (all if larger).
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            floor: 1e-5,
            samples_per_param: 24,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(param, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: (usize, usize, f64, f64),
    pub checked: usize,
}

/// Compare tape gradients of `loss(params)` against a five-point central
/// difference on sampled coordinates.
pub fn grad_check<F, E>(
    params: &[Tensor],
    loss: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |ps: &[Tensor]| -> Result<f64, E> {
        let mut t = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let l = loss(&mut t, &vars)?;
        Ok(t.value(l).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let l = loss(&mut tape, &vars)?;
    let grads = tape.backward(l)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
        checked: 0,
    };
    let h = opts.step;
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.tensor(vars[pi]);
        let n = p.len();
        let idx = sample(&mut rng, n, opts.samples_per_param.min(n));
        for i in idx.iter() {
            let x0 = p.data()[i];
            let mut at = |dx: f64| {
                work[pi].data_mut()[i] = x0 + dx;
                eval(&work)
            };
            let (f2, f1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
            work[pi].data_mut()[i] = x0;
            let numeric = (-f2 + 8.0 * f1 - 8.0 * m1 + m2) / (12.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, i, a, numeric);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn opts() -> GradCheckOptions {
        GradCheckOptions {
            samples_per_param: 1000,
            ..Default::default()
        }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn elementwise_ops() {
        let ps = [randn(&[3, 8], 1), randn(&[3, 8], 2), randn(&[8], 3)];
        let r = grad_check(
            &ps,
            |t, v| {
                let a = t.mul(v[0], v[1])?;
                let b = t.silu(a)?;
                let c = t.gelu(v[1])?;
                let d = t.sub(b, c)?;
                let e = t.mul_row(d, v[2])?;
                let f = t.abs(e)?;
                let g = t.rms_norm(f, 1e-6)?;
                let h = t.softmax(g)?;
                let k = t.mul(h, v[0])?;
                t.sum(k)
            },
            &opts(),
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn matmuls_normalize_and_cross_entropy() {
        let ps = [randn(&[4, 16], 4), randn(&[6, 16], 5), randn(&[6, 5], 6)];
        let r = grad_check(
            &ps,
            |t, v| {
                let y = t.linear(v[0], v[1], None)?;
                let n = t.normalize(y, 3)?;
                let z = t.matmul(n, v[2])?;
                let zt = t.transpose(z)?;
                let z2 = t.transpose(zt)?;
                let s = t.scale(z2, 2.5)?;
                t.cross_entropy(s, &[0, 4, 2, 2])
            },
            &opts(),
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn embedding_and_attention() {
        let ps = [
            randn(&[10, 8], 7),
            randn(&[8, 8], 8),
            randn(&[8, 8], 9),
            randn(&[8, 8], 10),
        ];
        let ids = [1, 3, 3, 9, 0, 2];
        let r = grad_check(
            &ps,
            |t, v| {
                let x = t.embedding(v[0], &ids)?;
                let q = t.linear(x, v[1], None)?;
                let k = t.linear(x, v[2], None)?;
                let vv = t.linear(x, v[3], None)?;
                let o = t.causal_attention(q, k, vv, 3, 2, 0.5)?;
                t.cross_entropy(o, &[1, 2, 3, 4, 5, 6])
            },
            &opts(),
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // abs has a kink inside the stencil of the first coordinate
        let ps = [Tensor::from_vec(vec![5e-5, 1.0])];
        let r = grad_check(
            &ps,
            |t, v| {
                let a = t.abs(v[0])?;
                let b = t.scale(a, 1.0)?;
                t.sum(b)
            },
            &opts(),
        )
        .unwrap();
        assert_eq!(r.worst.0, 0);
        assert!(r.max_rel_err > 0.3, "{r:?}");
    }
}
