//! Loss-landscape flatness under Gaussian weight noise, and the
//! learning-rate sensitivity sweep.

mod sweep;

pub use sweep::{log_grid, lr_sweep, Budget, LrSweepReport, Precision, SweepCell};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::experiments::ExperimentError;
use crate::fpquant::counter_hash;
use crate::models::{Batch, ModelError, ModelState};
use crate::tensorcore::Tensor;

#[derive(Debug, Error)]
pub enum LandscapeError {
    #[error("perturbation scale must be non-negative, got {0}")]
    NegativeAlpha(f64),
    #[error("alpha grid needs at least two distinct values to fit a slope, got {0:?}")]
    DegenerateGrid(Vec<f64>),
    #[error("need at least {need} noise seeds, got {got}")]
    TooFewSeeds { need: usize, got: usize },
    #[error("loss must be positive, got {0}")]
    NonPositiveLoss(f64),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] Box<ExperimentError>),
}

/// Minimum number of noise seeds averaged per perturbation scale.
pub const MIN_SEEDS: usize = 10;

/// Relative clean-loss gap above which two states are flagged as unmatched.
pub const CLEAN_LOSS_TOLERANCE: f64 = 0.05;

const NOISE_STREAM: u64 = 0x4e_4f49_5345;

/// Mean validation loss in nats per token over equally sized batches.
pub fn eval_loss(state: &ModelState, val: &[Batch]) -> Result<f64, LandscapeError> {
    if val.is_empty() {
        return Err(LandscapeError::Empty("validation set"));
    }
    let losses = val
        .par_iter()
        .map(|b| state.loss(b))
        .collect::<Result<Vec<f64>, ModelError>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Copy of `state` with i.i.d. Gaussian noise of standard deviation
/// `alpha·‖W‖_F/√n` added to every weight matrix `W` of `n` entries.
/// Gains and scalars are left alone and nothing is renormalized.
pub fn perturbed(state: &ModelState, alpha: f64, seed: u64) -> Result<ModelState, LandscapeError> {
    if !(alpha >= 0.0) {
        return Err(LandscapeError::NegativeAlpha(alpha));
    }
    let mut out = state.clone();
    for i in state.matrix_indices() {
        add_noise(&mut out.params_mut()[i], alpha, seed, i as u64);
    }
    Ok(out)
}

fn add_noise(w: &mut Tensor, alpha: f64, seed: u64, index: u64) {
    let std = alpha * w.norm() / (w.len() as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(counter_hash(seed, NOISE_STREAM, index));
    for v in w.data_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += std * z;
    }
}

/// Validation loss increase caused by [`perturbed`] noise.
pub fn perturb_and_eval(
    state: &ModelState,
    alpha: f64,
    seed: u64,
    val: &[Batch],
) -> Result<f64, LandscapeError> {
    let clean = eval_loss(state, val)?;
    let noisy = eval_loss(&perturbed(state, alpha, seed)?, val)?;
    Ok(noisy - clean)
}

/// Loss-increase curve of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchCurve {
    pub clean_loss: f64,
    /// `deltas[a][s]` for grid point `a` and seed `s`.
    pub deltas: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Least-squares slope of mean delta against alpha over the three
    /// smallest grid points.
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeReport {
    pub alpha_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub gpt: ArchCurve,
    pub ngpt: ArchCurve,
    /// `gpt.slope / ngpt.slope`.
    pub slope_ratio: f64,
    /// `|gpt − ngpt| / min` of the clean losses.
    pub clean_gap: f64,
    /// Clean losses differ by more than [`CLEAN_LOSS_TOLERANCE`].
    pub mismatch_warning: bool,
}

fn fit_points(alpha_grid: &[f64]) -> Result<Vec<usize>, LandscapeError> {
    let mut idx: Vec<usize> = (0..alpha_grid.len()).collect();
    idx.sort_by(|&a, &b| alpha_grid[a].total_cmp(&alpha_grid[b]));
    idx.dedup_by(|a, b| alpha_grid[*a] == alpha_grid[*b]);
    idx.truncate(3);
    if idx.len() < 2 {
        return Err(LandscapeError::DegenerateGrid(alpha_grid.to_vec()));
    }
    Ok(idx)
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn curve(
    state: &ModelState,
    alpha_grid: &[f64],
    seeds: &[u64],
    val: &[Batch],
    fit: &[usize],
) -> Result<ArchCurve, LandscapeError> {
    let clean_loss = eval_loss(state, val)?;
    let cells: Vec<(usize, usize)> = (0..alpha_grid.len())
        .flat_map(|a| (0..seeds.len()).map(move |s| (a, s)))
        .collect();
    let flat = cells
        .par_iter()
        .map(|&(a, s)| {
            let p = perturbed(state, alpha_grid[a], seeds[s])?;
            Ok(eval_loss(&p, val)? - clean_loss)
        })
        .collect::<Result<Vec<f64>, LandscapeError>>()?;
    let deltas: Vec<Vec<f64>> = flat.chunks(seeds.len()).map(<[f64]>::to_vec).collect();
    let mean: Vec<f64> = deltas
        .iter()
        .map(|d| d.iter().sum::<f64>() / d.len() as f64)
        .collect();
    let std = deltas
        .iter()
        .zip(&mean)
        .map(|(d, m)| {
            let n = d.len() as f64;
            (d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .collect();
    let xs: Vec<f64> = fit.iter().map(|&i| alpha_grid[i]).collect();
    let ys: Vec<f64> = fit.iter().map(|&i| mean[i]).collect();
    Ok(ArchCurve {
        clean_loss,
        slope: ols_slope(&xs, &ys),
        deltas,
        mean,
        std,
    })
}

/// Perturbation curves for both models with common noise seeds.
pub fn landscape_curve(
    gpt: &ModelState,
    ngpt: &ModelState,
    alpha_grid: &[f64],
    seeds: &[u64],
    val: &[Batch],
) -> Result<LandscapeReport, LandscapeError> {
    if let Some(&a) = alpha_grid.iter().find(|a| !(**a >= 0.0)) {
        return Err(LandscapeError::NegativeAlpha(a));
    }
    let fit = fit_points(alpha_grid)?;
    if seeds.len() < MIN_SEEDS {
        return Err(LandscapeError::TooFewSeeds {
            need: MIN_SEEDS,
            got: seeds.len(),
        });
    }
    let g = curve(gpt, alpha_grid, seeds, val, &fit)?;
    let n = curve(ngpt, alpha_grid, seeds, val, &fit)?;
    let clean_gap = (g.clean_loss - n.clean_loss).abs() / g.clean_loss.min(n.clean_loss);
    Ok(LandscapeReport {
        alpha_grid: alpha_grid.to_vec(),
        seeds: seeds.to_vec(),
        slope_ratio: g.slope / n.slope,
        mismatch_warning: clean_gap > CLEAN_LOSS_TOLERANCE,
        clean_gap,
        gpt: g,
        ngpt: n,
    })
}

/// `loss / ln 2 × tokens_per_byte`.
pub fn bits_per_byte(
    loss_nats_per_token: f64,
    tokens_per_byte: f64,
) -> Result<f64, LandscapeError> {
    if !(loss_nats_per_token > 0.0) {
        return Err(LandscapeError::NonPositiveLoss(loss_nats_per_token));
    }
    if !(tokens_per_byte > 0.0) {
        return Err(LandscapeError::NonPositiveLoss(tokens_per_byte));
    }
    Ok(loss_nats_per_token / std::f64::consts::LN_2 * tokens_per_byte)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Arch, ModelConfig};

    fn tiny(arch: Arch) -> ModelState {
        let mut c = ModelConfig::desk(arch).with_width(32, 2);
        c.n_layers = 1;
        c.seq_len = 8;
        ModelState::new(c).unwrap()
    }

    fn val() -> Vec<Batch> {
        let w: Vec<Vec<usize>> = (0..4)
            .map(|i| (0..9).map(|j| (i * 31 + j * 7) % 256).collect())
            .collect();
        vec![Batch::from_windows(&w)]
    }

    #[test]
    fn zero_alpha_is_exact() {
        let s = tiny(Arch::Gpt);
        assert_eq!(perturb_and_eval(&s, 0.0, 3, &val()).unwrap(), 0.0);
        assert!(matches!(
            perturb_and_eval(&s, -0.1, 3, &val()),
            Err(LandscapeError::NegativeAlpha(_))
        ));
    }

    #[test]
    fn source_untouched() {
        let s = tiny(Arch::Ngpt);
        let before = s.checksum();
        perturb_and_eval(&s, 0.3, 1, &val()).unwrap();
        assert_eq!(s.checksum(), before);
    }

    #[test]
    fn noise_scale_follows_each_matrix_norm() {
        let s = tiny(Arch::Gpt);
        let alpha = 0.2;
        let p = perturbed(&s, alpha, 5).unwrap();
        for i in s.matrix_indices() {
            let (w, q) = (&s.params()[i], &p.params()[i]);
            let n = w.len() as f64;
            let noise: Vec<f64> = q.data().iter().zip(w.data()).map(|(a, b)| a - b).collect();
            let emp = (noise.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
            let want = alpha * w.norm() / n.sqrt();
            assert!((emp / want - 1.0).abs() < 0.1, "{i}: {emp} vs {want}");
        }
    }

    #[test]
    fn noise_std_on_square_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = Tensor::randn(&[64, 64], 0.7, &mut rng);
        let alpha = 0.3;
        let want = alpha * w.norm() / 64.0;
        let mut acc = 0.0;
        for seed in 0..1000u64 {
            let mut p = w.clone();
            add_noise(&mut p, alpha, seed, 0);
            acc += (p.data()[17] - w.data()[17]).powi(2);
        }
        let emp = (acc / 1000.0).sqrt();
        assert!((emp / want - 1.0).abs() < 0.05, "{emp} vs {want}");
    }

    #[test]
    fn identical_states_give_unit_ratio() {
        let s = tiny(Arch::Gpt);
        let seeds: Vec<u64> = (0..10).collect();
        let r = landscape_curve(&s, &s, &[0.0, 0.05, 0.1, 0.2], &seeds, &val()).unwrap();
        assert!((r.slope_ratio - 1.0).abs() < 1e-12);
        assert!(!r.mismatch_warning);
        assert_eq!(r.gpt.mean[0], 0.0);
        assert_eq!(r.gpt.deltas.len(), 4);
        assert_eq!(r.gpt.deltas[1].len(), 10);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let s = tiny(Arch::Gpt);
        let seeds: Vec<u64> = (0..10).collect();
        assert!(matches!(
            landscape_curve(&s, &s, &[0.0], &seeds, &val()),
            Err(LandscapeError::DegenerateGrid(_))
        ));
        assert!(matches!(
            landscape_curve(&s, &s, &[0.0, 0.1], &seeds[..3], &val()),
            Err(LandscapeError::TooFewSeeds { .. })
        ));
    }

    #[test]
    fn bpb_arithmetic() {
        let ln2 = std::f64::consts::LN_2;
        assert!((bits_per_byte(ln2, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((bits_per_byte(2.0 * ln2, 1.0).unwrap() - 2.0).abs() < 1e-15);
        assert!((bits_per_byte(1.386294, 1.0).unwrap() - 2.0).abs() < 1e-4);
        assert!(bits_per_byte(0.0, 1.0).is_err());
        assert!(bits_per_byte(-1.0, 1.0).is_err());
    }

    #[test]
    fn ols_recovers_line() {
        let x = [0.0, 0.1, 0.2];
        let y = [1.0, 1.3, 1.6];
        assert!((ols_slope(&x, &y) - 3.0).abs() < 1e-12);
    }
}
