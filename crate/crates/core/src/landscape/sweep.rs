use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{bits_per_byte, eval_loss, LandscapeError};
use crate::experiments::Corpus;
use crate::fpquant::{QuantConfig, QuantError};
use crate::models::{Arch, ModelConfig, ModelError, ModelState};
use crate::tensorcore::TensorError;

/// Named quantization setting of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Precision {
    pub name: String,
    pub quant: Option<QuantConfig>,
}

impl Precision {
    pub fn new(name: &str, quant: Option<QuantConfig>) -> Self {
        Self {
            name: name.to_string(),
            quant,
        }
    }
}

/// Training budget shared by every cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub steps: usize,
    pub batch_size: usize,
    pub seq: usize,
    /// Seeds both the initialization and the data order.
    pub seed: u64,
    pub val_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub arch: Arch,
    pub precision: String,
    pub lr: f64,
    pub seed: u64,
    pub steps: usize,
    /// Final validation bits per byte; `None` when the cell diverged.
    pub bpb: Option<f64>,
    pub diverged: bool,
    /// Step at which a non-finite value appeared.
    pub diverged_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSweepReport {
    pub lr_grid: Vec<f64>,
    pub budget: Budget,
    pub cells: Vec<SweepCell>,
}

impl LrSweepReport {
    fn finished(&self, arch: Arch, precision: Option<&str>) -> Vec<&SweepCell> {
        self.cells
            .iter()
            .filter(|c| c.arch == arch && precision.is_none_or(|p| c.precision == p))
            .filter(|c| c.bpb.is_some())
            .collect()
    }

    /// Max minus min BPB over the non-divergent cells of `arch`, across all
    /// precisions when `precision` is `None`.
    pub fn spread(&self, arch: Arch, precision: Option<&str>) -> Option<f64> {
        let v: Vec<f64> = self
            .finished(arch, precision)
            .iter()
            .filter_map(|c| c.bpb)
            .collect();
        if v.is_empty() {
            return None;
        }
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        Some(hi - lo)
    }

    /// Learning rate with the lowest BPB for one configuration.
    pub fn argmin(&self, arch: Arch, precision: &str) -> Option<f64> {
        self.finished(arch, Some(precision))
            .into_iter()
            .min_by(|a, b| a.bpb.unwrap().total_cmp(&b.bpb.unwrap()))
            .map(|c| c.lr)
    }

    pub fn divergent(&self) -> impl Iterator<Item = &SweepCell> {
        self.cells.iter().filter(|c| c.diverged)
    }
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
            .collect(),
    }
}

/// Non-finite values anywhere in the forward or backward pass, including
/// a collapsed weight slice during nGPT renormalization.
fn diverged(e: &ModelError) -> bool {
    matches!(
        e,
        ModelError::Tensor {
            source: TensorError::NonFinite { .. }
                | TensorError::ZeroNorm { .. }
                | TensorError::Quant(QuantError::NonFinite { .. }),
            ..
        } | ModelError::Quant(QuantError::NonFinite { .. })
            | ModelError::Invariant(_)
    )
}

fn run_cell(
    base: &ModelConfig,
    precision: &Precision,
    lr: f64,
    budget: &Budget,
    corpus: &Corpus,
    val: &[crate::models::Batch],
) -> Result<SweepCell, LandscapeError> {
    let mut cfg = base.clone();
    cfg.lr = lr;
    cfg.quant = precision.quant.clone();
    cfg.seed = budget.seed;
    let mut state = ModelState::new(cfg)?;
    let mut cell = SweepCell {
        arch: base.arch,
        precision: precision.name.clone(),
        lr,
        seed: budget.seed,
        steps: budget.steps,
        bpb: None,
        diverged: false,
        diverged_at: None,
    };
    for step in 0..budget.steps {
        let batch = corpus
            .train_batch(step as u64, budget.batch_size, budget.seq, budget.seed)
            .map_err(Box::new)?;
        match state.train_step(&batch) {
            Ok(l) if l.is_finite() => {}
            Ok(_) => {
                cell.diverged = true;
            }
            Err(e) if diverged(&e) => cell.diverged = true,
            Err(e) => return Err(e.into()),
        }
        if cell.diverged {
            cell.diverged_at = Some(step);
            return Ok(cell);
        }
    }
    match eval_loss(&state, val) {
        Ok(l) if l.is_finite() => cell.bpb = Some(bits_per_byte(l, corpus.tokens_per_byte())?),
        Ok(_) => cell.diverged = true,
        Err(LandscapeError::Model(e)) if diverged(&e) => cell.diverged = true,
        Err(e) => return Err(e),
    }
    Ok(cell)
}

/// Train every `(arch, precision, lr)` cell for the same budget from the
/// same initialization seed and data order, and record the final
/// validation BPB. Non-finite training is recorded, not raised.
pub fn lr_sweep(
    bases: &[ModelConfig],
    precisions: &[Precision],
    lr_grid: &[f64],
    budget: &Budget,
    corpus: &Corpus,
) -> Result<LrSweepReport, LandscapeError> {
    if lr_grid.is_empty() {
        return Err(LandscapeError::Empty("learning-rate grid"));
    }
    if bases.is_empty() || precisions.is_empty() {
        return Err(LandscapeError::Empty("sweep configuration list"));
    }
    let val = corpus
        .val_batches(budget.batch_size, budget.seq, budget.val_batches)
        .map_err(Box::new)?;
    let jobs: Vec<(&ModelConfig, &Precision, f64)> = bases
        .iter()
        .flat_map(|b| {
            precisions
                .iter()
                .flat_map(move |p| lr_grid.iter().map(move |&lr| (b, p, lr)))
        })
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(b, p, lr)| run_cell(b, p, lr, budget, corpus, &val))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LrSweepReport {
        lr_grid: lr_grid.to_vec(),
        budget: *budget,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        let mut c = ModelConfig::desk(Arch::Ngpt).with_width(16, 2);
        c.n_layers = 1;
        c.seq_len = 8;
        c
    }

    fn budget() -> Budget {
        Budget {
            steps: 3,
            batch_size: 2,
            seq: 8,
            seed: 5,
            val_batches: 2,
        }
    }

    #[test]
    fn grid_spans_ratio() {
        let g = log_grid(1e-4, 1e-2, 8);
        assert_eq!(g.len(), 8);
        assert!((g[0] - 1e-4).abs() < 1e-18);
        assert!((g[7] / g[0] - 100.0).abs() < 1e-9);
        for w in g.windows(2) {
            assert!((w[1] / w[0] - 100f64.powf(1.0 / 7.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_cell_and_duplicates() {
        let corpus = Corpus::synthetic(4000, 1).unwrap();
        let p = [Precision::new("off", None)];
        let r = lr_sweep(&[tiny()], &p, &[1e-3], &budget(), &corpus).unwrap();
        assert_eq!(r.cells.len(), 1);
        assert!(r.cells[0].bpb.is_some());

        let r = lr_sweep(&[tiny()], &p, &[2e-3, 2e-3], &budget(), &corpus).unwrap();
        assert_eq!(r.cells[0].bpb, r.cells[1].bpb);
        assert_eq!(r.spread(Arch::Ngpt, None), Some(0.0));
        assert_eq!(r.argmin(Arch::Ngpt, "off"), Some(2e-3));
    }

    #[test]
    fn empty_grid_rejected() {
        let corpus = Corpus::synthetic(4000, 1).unwrap();
        let p = [Precision::new("off", None)];
        assert!(matches!(
            lr_sweep(&[tiny()], &p, &[], &budget(), &corpus),
            Err(LandscapeError::Empty(_))
        ));
    }

    #[test]
    fn absurd_lr_is_recorded_not_raised() {
        let corpus = Corpus::synthetic(4000, 1).unwrap();
        let mut c = ModelConfig::desk(Arch::Gpt).with_width(16, 2);
        c.n_layers = 1;
        c.seq_len = 8;
        c.warmup_samples = 0;
        let p = [Precision::new("off", None)];
        let b = Budget {
            steps: 20,
            ..budget()
        };
        let r = lr_sweep(&[c], &p, &[1e300], &b, &corpus).unwrap();
        assert_eq!(r.cells.len(), 1);
        let cell = &r.cells[0];
        assert_eq!(cell.diverged, cell.bpb.is_none());
        assert_eq!(r.divergent().count(), usize::from(cell.diverged));
    }
}
