use super::{Corpus, EvalRecord, ExperimentError, LossRecord};
use crate::landscape::{bits_per_byte, eval_loss};
use crate::models::{Arch, Batch, ModelState};

/// Weight-norm tolerance checked after every nGPT step.
const NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    /// Data-order seed.
    pub seed: u64,
    /// Evaluate every this many steps and after the last one.
    pub eval_interval: usize,
    pub val_batches: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub trace: Vec<LossRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainOutcome {
    pub fn final_val_loss(&self) -> Option<f64> {
        self.evals.last().map(|e| e.val_loss)
    }
}

fn evaluate(state: &ModelState, step: usize, val: &[Batch]) -> Result<EvalRecord, ExperimentError> {
    let l = eval_loss(state, val)?;
    Ok(EvalRecord {
        step,
        val_loss: l,
        bpb: bits_per_byte(l, 1.0)?,
    })
}

/// Train `state` on `corpus` for `opts.steps` further steps, continuing the
/// data order from the steps it has already taken. nGPT weight norms are
/// checked after every step and a drift beyond 1e-6 aborts with an
/// invariant error.
pub fn train_model(
    mut state: ModelState,
    corpus: &Corpus,
    opts: &TrainOptions,
) -> Result<TrainOutcome, ExperimentError> {
    let seq = state.config().seq_len;
    let val = corpus.val_batches(opts.batch_size, seq, opts.val_batches.max(1))?;
    let mut trace = Vec::with_capacity(opts.steps);
    let mut evals = Vec::new();
    let start = state.steps_taken();
    let end = start + opts.steps;
    for step in start..end {
        let batch = corpus.train_batch(step as u64, opts.batch_size, seq, opts.seed)?;
        let lr = state.current_lr(batch.sequences());
        let loss = state.train_step(&batch)?;
        trace.push(LossRecord { step, loss, lr });
        if state.config().arch == Arch::Ngpt {
            let dev = state.weight_norm_deviation();
            if dev > NORM_TOL {
                return Err(ExperimentError::Invariant(format!(
                    "weight norm drifted by {dev:e} at step {step}"
                )));
            }
        }
        if opts.eval_interval > 0 && (step + 1 - start) % opts.eval_interval == 0 {
            evals.push(evaluate(&state, step + 1, &val)?);
        }
    }
    if evals.last().map(|e| e.step) != Some(end) {
        evals.push(evaluate(&state, end, &val)?);
    }
    Ok(TrainOutcome {
        state,
        trace,
        evals,
    })
}

/// Two runs brought to comparable validation loss.
#[derive(Debug, Clone)]
pub struct MatchedPair {
    pub first: TrainOutcome,
    pub second: TrainOutcome,
    /// `|a − b| / min(a, b)` of the final validation losses.
    pub gap: f64,
}

impl MatchedPair {
    pub fn within(&self, tolerance: f64) -> bool {
        self.gap <= tolerance
    }
}

fn extend(
    run: &mut TrainOutcome,
    corpus: &Corpus,
    opts: &TrainOptions,
) -> Result<(), ExperimentError> {
    let state = run.state.clone();
    let more = train_model(state, corpus, opts)?;
    run.state = more.state;
    run.trace.extend(more.trace);
    run.evals.extend(more.evals);
    Ok(())
}

fn loss_gap(a: &TrainOutcome, b: &TrainOutcome) -> Result<(f64, bool), ExperimentError> {
    let (la, lb) = match (a.final_val_loss(), b.final_val_loss()) {
        (Some(la), Some(lb)) => (la, lb),
        _ => return Err(ExperimentError::Invariant("run without evaluation".into())),
    };
    Ok(((la - lb).abs() / la.min(lb), la > lb))
}

/// Train both states for `opts.steps`, then keep training whichever has
/// the higher validation loss in chunks of `chunk` steps until the gap is
/// within `tolerance` or `max_extra` further steps have been spent.
pub fn train_matched(
    first: ModelState,
    second: ModelState,
    corpus: &Corpus,
    opts: &TrainOptions,
    tolerance: f64,
    chunk: usize,
    max_extra: usize,
) -> Result<MatchedPair, ExperimentError> {
    let mut a = train_model(first, corpus, opts)?;
    let mut b = train_model(second, corpus, opts)?;
    let step = TrainOptions {
        steps: chunk.max(1),
        eval_interval: 0,
        ..*opts
    };
    let mut spent = 0;
    let (mut gap, mut a_behind) = loss_gap(&a, &b)?;
    while gap > tolerance && spent < max_extra {
        if a_behind {
            extend(&mut a, corpus, &step)?;
        } else {
            extend(&mut b, corpus, &step)?;
        }
        spent += step.steps;
        (gap, a_behind) = loss_gap(&a, &b)?;
    }
    Ok(MatchedPair {
        first: a,
        second: b,
        gap,
    })
}

/// Trailing moving average of the loss trace over `window` steps.
pub fn smoothed(trace: &[LossRecord], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(trace.len());
    let mut acc = 0.0;
    for (i, r) in trace.iter().enumerate() {
        acc += r.loss;
        if i >= w {
            acc -= trace[i - w].loss;
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;

    #[test]
    fn short_run_learns_and_evaluates_at_the_end() {
        let corpus = Corpus::synthetic(20_000, 1).unwrap();
        for arch in [Arch::Gpt, Arch::Ngpt] {
            let mut c = ModelConfig::desk(arch).with_width(16, 2);
            c.n_layers = 1;
            c.seq_len = 16;
            c.lr = 1e-2;
            c.warmup_samples = 0;
            let opts = TrainOptions {
                steps: 30,
                batch_size: 4,
                seed: 0,
                eval_interval: 20,
                val_batches: 2,
            };
            let out = train_model(ModelState::new(c).unwrap(), &corpus, &opts).unwrap();
            assert_eq!(out.trace.len(), 30);
            assert_eq!(
                out.evals.iter().map(|e| e.step).collect::<Vec<_>>(),
                [20, 30]
            );
            let s = smoothed(&out.trace, 10);
            assert!(s[29] < s[9], "{arch}: {s:?}");

            let more = TrainOptions { steps: 5, ..opts };
            let resumed = train_model(out.state, &corpus, &more).unwrap();
            assert_eq!(resumed.trace[0].step, 30);
            assert_eq!(resumed.evals.last().unwrap().step, 35);
        }
    }

    #[test]
    fn matching_extends_the_lagging_run() {
        let corpus = Corpus::synthetic(20_000, 1).unwrap();
        let mk = |lr: f64| {
            let mut c = ModelConfig::desk(Arch::Gpt).with_width(16, 2);
            c.n_layers = 1;
            c.seq_len = 16;
            c.lr = lr;
            c.warmup_samples = 0;
            ModelState::new(c).unwrap()
        };
        let opts = TrainOptions {
            steps: 10,
            batch_size: 4,
            seed: 0,
            eval_interval: 0,
            val_batches: 2,
        };
        let m = train_matched(mk(1e-2), mk(1e-4), &corpus, &opts, 0.02, 10, 200).unwrap();
        assert_eq!(m.first.state.steps_taken(), 10);
        assert!(m.second.state.steps_taken() > 10);
        assert!(
            m.within(0.02) || m.second.state.steps_taken() == 210,
            "{}",
            m.gap
        );
        assert_eq!(m.second.trace.len(), m.second.state.steps_taken());
    }

    #[test]
    fn smoothing_window() {
        let t: Vec<LossRecord> = [4.0, 2.0, 6.0]
            .iter()
            .enumerate()
            .map(|(step, &loss)| LossRecord {
                step,
                loss,
                lr: 0.0,
            })
            .collect();
        assert_eq!(smoothed(&t, 2), vec![4.0, 3.0, 4.0]);
    }
}
