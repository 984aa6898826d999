use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use super::{
    mlp_align, precision_quant, retarget, train_model, write_csv, Corpus, CorrRecord, Experiment,
    ExperimentConfig, ExperimentError, GemmSnrRecord, LandscapeRecord, LrSweepRecord, Manifest,
    MlpSettings, MlpSummaryRecord, MlpTraceRecord, PartialRecord, ScalingRecord, SnrRecord,
    TrainOptions,
};
use crate::analysis::{
    equicorrelated_rows, gemm_correlation, gemm_partial_curve, gemm_scaling, measure,
    quantize_operands, snr_ratio_and_regimes, ScalingPoint, SnrReport, Stage,
};
use crate::landscape::{landscape_curve, log_grid, lr_sweep, Budget, Precision};
use crate::models::{load_checkpoint, save_checkpoint, Arch, ModelState, Tap};
use crate::tensorcore::Tensor;

/// Result of [`run`]: where the artifacts went and what was noted.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
}

struct Output {
    dir: PathBuf,
    artifacts: Vec<String>,
    notes: Vec<String>,
}

impl Output {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), ExperimentError> {
        write_csv(&self.path(name), rows)?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    fn json(&mut self, name: &str, v: &serde_json::Value) -> Result<(), ExperimentError> {
        let p = self.path(name);
        let text = serde_json::to_string_pretty(v).expect("json value");
        std::fs::write(&p, text).map_err(|e| ExperimentError::output(&p, e))?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    fn text(&mut self, name: &str, text: &str) -> Result<(), ExperimentError> {
        let p = self.path(name);
        std::fs::write(&p, text).map_err(|e| ExperimentError::output(&p, e))?;
        self.artifacts.push(name.to_string());
        Ok(())
    }
}

fn load_corpus(cfg: &ExperimentConfig, out: &mut Output) -> Result<Corpus, ExperimentError> {
    match &cfg.data_path {
        Some(p) => Corpus::from_path(p),
        None => {
            out.notes.push(format!(
                "no data_path given: using {} bytes of synthetic grammar text",
                cfg.synthetic_bytes
            ));
            Corpus::synthetic(cfg.synthetic_bytes, cfg.seeds[0])
        }
    }
}

fn load_state(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<ModelState, ExperimentError> {
    Ok(match path {
        Some(p) => load_checkpoint(p)?,
        None => {
            let mut m = cfg.model.clone();
            m.seed = cfg.seeds[0];
            ModelState::new(m)?
        }
    })
}

/// Every block-GEMM operand pair of a forward pass over the first
/// `batch` validation sequences.
pub fn analysis_taps(
    state: &ModelState,
    corpus: &Corpus,
    batch: usize,
) -> Result<Vec<Tap>, ExperimentError> {
    let seq = state.config().seq_len;
    let b = corpus.val_batches(batch, seq, 1)?.remove(0);
    let (_, taps) = state.forward(&b.inputs, seq, true)?;
    Ok(taps.expect("taps requested").gemms)
}

fn snr_report(taps: &[Tap], cfg: &ExperimentConfig) -> Result<SnrReport, ExperimentError> {
    let layers = taps
        .iter()
        .map(|t| {
            let (x_hat, w_hat) = quantize_operands(&t.x, &t.w, &cfg.quant)?;
            measure(t.layer, t.gemm, &t.x, &t.w, &x_hat, &w_hat)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SnrReport::from_layers(layers)?)
}

/// Per-block rows of `snr.csv`.
pub fn snr_records(report: &SnrReport) -> Vec<SnrRecord> {
    report
        .per_block()
        .into_iter()
        .flat_map(|(layer, s)| {
            Stage::ALL.into_iter().map(move |stage| SnrRecord {
                layer,
                stage,
                snr_db: s.get(stage).db_or_inf(),
            })
        })
        .collect()
}

fn default_grid(d: usize) -> Vec<usize> {
    let mut g: Vec<usize> = std::iter::successors(Some(16), |k| Some(k * 2))
        .take_while(|&k| k < d)
        .collect();
    g.push(d);
    g
}

fn db(r: f64) -> f64 {
    10.0 * r.log10()
}

fn analyze_snr(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    out: &mut Output,
) -> Result<(), ExperimentError> {
    let state = load_state(cfg, cfg.checkpoint.as_deref())?;
    let taps = analysis_taps(&state, corpus, cfg.analysis_batch)?;
    let report = snr_report(&taps, cfg)?;
    out.csv("snr.csv", &snr_records(&report))?;
    let per_gemm: Vec<GemmSnrRecord> = report
        .layers
        .iter()
        .flat_map(|l| {
            Stage::ALL.into_iter().map(move |stage| GemmSnrRecord {
                layer: l.layer,
                gemm: l.gemm.clone(),
                stage,
                snr_db: l.stages.get(stage).db_or_inf(),
            })
        })
        .collect();
    out.csv("snr_gemm.csv", &per_gemm)?;
    let stages: serde_json::Map<String, serde_json::Value> = Stage::ALL
        .iter()
        .map(|&s| (s.name().to_string(), json!(report.stages.get(s).db())))
        .collect();
    out.json(
        "snr_summary.json",
        &json!({
            "arch": state.config().arch,
            "stages_db": stages,
            "averaging_gain_db": report.averaging_gain_db,
        }),
    )
}

fn correlation(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    out: &mut Output,
) -> Result<(), ExperimentError> {
    let state = load_state(cfg, cfg.checkpoint.as_deref())?;
    let taps = analysis_taps(&state, corpus, cfg.analysis_batch)?;
    let mut rows: Vec<CorrRecord> = Vec::new();
    let mut partial = Vec::new();
    let mut flat = true;
    for (i, t) in taps.iter().enumerate() {
        let (x_hat, w_hat) = quantize_operands(&t.x, &t.w, &cfg.quant)?;
        let c = gemm_correlation(&t.x, &t.w, &x_hat, &w_hat)?;
        match rows.last_mut() {
            Some(r) if r.layer == t.layer => {
                // running mean over the block's GEMMs
                let n = taps[..i].iter().filter(|u| u.layer == t.layer).count() as f64;
                r.rho_s += (c.rho_s - r.rho_s) / (n + 1.0);
                r.rho_n += (c.rho_n - r.rho_n) / (n + 1.0);
            }
            _ => rows.push(CorrRecord {
                layer: t.layer,
                rho_s: c.rho_s,
                rho_n: c.rho_n,
            }),
        }
        let grid = match &cfg.analysis.k_grid {
            Some(g) => g.iter().copied().filter(|&k| k <= t.x.cols()).collect(),
            None => default_grid(t.x.cols()),
        };
        let curve = gemm_partial_curve(
            &t.x,
            &t.w,
            &grid,
            cfg.analysis.bootstrap,
            cfg.seeds[0] + i as u64,
        )?;
        flat &= curve.is_flat(3.0).unwrap_or(true);
        for (j, &k) in curve.k.iter().enumerate() {
            partial.push(PartialRecord {
                layer: t.layer,
                gemm: t.gemm.to_string(),
                k,
                rho: curve.rho[j],
                se: curve.se.get(j).copied().unwrap_or(f64::NAN),
            });
        }
    }
    out.csv("corr.csv", &rows)?;
    out.csv("partial.csv", &partial)?;
    let n = rows.len() as f64;
    out.json(
        "corr_summary.json",
        &json!({
            "arch": state.config().arch,
            "rho_s": rows.iter().map(|r| r.rho_s).sum::<f64>() / n,
            "rho_n": rows.iter().map(|r| r.rho_n).sum::<f64>() / n,
            "partial_curves_flat_at_3se": flat,
        }),
    )
}

fn scaling_curve(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    out: &mut Output,
) -> Result<(), ExperimentError> {
    let sc = &cfg.scaling;
    let (label, rho, points) = match sc.synthetic_rho {
        Some(rho) => {
            let d = sc
                .widths
                .as_ref()
                .and_then(|w| w.iter().copied().max())
                .unwrap_or(cfg.model.d_model);
            let widths = sc.widths.clone().unwrap_or_else(|| default_grid(d));
            let x = equicorrelated_rows(sc.draws, d, rho, 1.0, 0.0, cfg.seeds[0]);
            let w = Tensor::full(&[1, d], 1.0);
            let (x_hat, w_hat) = quantize_operands(&x, &w, &cfg.quant)?;
            out.notes
                .push(format!("synthetic equi-correlated inputs with rho {rho}"));
            let pts = gemm_scaling(&x, &w, &x_hat, &w_hat, &widths, rho)?;
            ("synthetic".to_string(), rho, pts)
        }
        None => {
            let state = load_state(cfg, cfg.checkpoint.as_deref())?;
            let taps = analysis_taps(&state, corpus, cfg.analysis_batch)?;
            let d = state.config().d_model;
            let widths = sc.widths.clone().unwrap_or_else(|| default_grid(d));
            let mut quant = Vec::with_capacity(taps.len());
            let mut rho = 0.0;
            for t in &taps {
                let (x_hat, w_hat) = quantize_operands(&t.x, &t.w, &cfg.quant)?;
                rho += gemm_correlation(&t.x, &t.w, &x_hat, &w_hat)?.rho_s / taps.len() as f64;
                quant.push((x_hat, w_hat));
            }
            let mut pooled: Vec<ScalingPoint> = widths
                .iter()
                .map(|&d| ScalingPoint {
                    d,
                    ..Default::default()
                })
                .collect();
            for (t, (x_hat, w_hat)) in taps.iter().zip(&quant) {
                for (acc, p) in pooled
                    .iter_mut()
                    .zip(gemm_scaling(&t.x, &t.w, x_hat, w_hat, &widths, rho)?)
                {
                    acc.add(&p);
                }
            }
            (state.config().arch.to_string(), rho, pooled)
        }
    };
    let rows: Vec<ScalingRecord> = points
        .iter()
        .map(|p| ScalingRecord {
            arch: label.clone(),
            d: p.d,
            empirical: db(p.empirical()),
            theory: db(p.theory()),
        })
        .collect();
    match rows.iter().map(|r| r.d).min() {
        Some(16) => {}
        other => {
            return Err(ExperimentError::Invariant(format!(
                "smallest summation length is {other:?}, expected 16"
            )))
        }
    }
    if let Some(r) = rows
        .iter()
        .find(|r| !r.empirical.is_finite() || !r.theory.is_finite())
    {
        return Err(ExperimentError::Invariant(format!(
            "non-finite SNR at D = {}",
            r.d
        )));
    }
    out.csv("scaling.csv", &rows)?;
    let mut meta = json!({ "arch": label, "rho_s": rho, "snr_unit": "dB" });
    if let (Some(n), Some(g)) = (sc.rho_ngpt, sc.rho_gpt) {
        let widths: Vec<f64> = rows.iter().map(|r| r.d as f64).collect();
        let r = snr_ratio_and_regimes(n, g, &widths)?;
        meta["regimes"] = json!({
            "rho_ngpt": r.rho_ngpt,
            "rho_gpt": r.rho_gpt,
            "t1": r.t1,
            "t2": r.t2,
            "saturation": r.saturation,
            "curve": r.curve.iter().map(|(d, ratio, reg)| json!({
                "D": d, "ratio": ratio, "regime": reg.to_string()
            })).collect::<Vec<_>>(),
        });
    }
    out.json("scaling_meta.json", &meta)
}

fn landscape(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    out: &mut Output,
) -> Result<(), ExperimentError> {
    let ls = &cfg.landscape;
    let need = |p: &Option<PathBuf>, field: &str| {
        p.clone().ok_or_else(|| ExperimentError::Config {
            field: format!("landscape.{field}"),
            reason: "landscape needs both trained checkpoints".into(),
        })
    };
    let gpt = load_checkpoint(&need(&ls.gpt_checkpoint, "gpt_checkpoint")?)?;
    let ngpt = load_checkpoint(&need(&ls.ngpt_checkpoint, "ngpt_checkpoint")?)?;
    let seq = gpt.config().seq_len.min(ngpt.config().seq_len);
    let val = corpus.val_batches(cfg.batch_size, seq, cfg.val_batches)?;
    let seeds: Vec<u64> = (0..ls.noise_seeds as u64).collect();
    let r = landscape_curve(&gpt, &ngpt, &ls.alpha_grid, &seeds, &val)?;
    let mut rows = Vec::new();
    for (arch, c) in [(Arch::Gpt, &r.gpt), (Arch::Ngpt, &r.ngpt)] {
        for (a, &alpha) in r.alpha_grid.iter().enumerate() {
            for (s, &seed) in r.seeds.iter().enumerate() {
                rows.push(LandscapeRecord {
                    arch,
                    alpha,
                    seed,
                    delta: c.deltas[a][s],
                });
            }
        }
    }
    if r.mismatch_warning {
        out.notes.push(format!(
            "clean losses differ by {:.1}%, above the 5% matching tolerance",
            100.0 * r.clean_gap
        ));
    }
    out.csv("landscape.csv", &rows)?;
    out.json(
        "landscape_summary.json",
        &json!({
            "alpha_grid": r.alpha_grid,
            "gpt": { "clean_loss": r.gpt.clean_loss, "mean": r.gpt.mean, "std": r.gpt.std, "slope": r.gpt.slope },
            "ngpt": { "clean_loss": r.ngpt.clean_loss, "mean": r.ngpt.mean, "std": r.ngpt.std, "slope": r.ngpt.slope },
            "slope_ratio": r.slope_ratio,
            "clean_gap": r.clean_gap,
            "mismatch_warning": r.mismatch_warning,
        }),
    )
}

fn sweep(cfg: &ExperimentConfig, corpus: &Corpus, out: &mut Output) -> Result<(), ExperimentError> {
    let sw = &cfg.sweep;
    let bases: Vec<_> = sw.archs.iter().map(|&a| retarget(&cfg.model, a)).collect();
    let precisions = sw
        .precisions
        .iter()
        .map(|p| Ok(Precision::new(p, precision_quant(p)?)))
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let grid = log_grid(sw.lr_min, sw.lr_max, sw.points);
    let budget = Budget {
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        seq: cfg.model.seq_len,
        seed: cfg.seeds[0],
        val_batches: cfg.val_batches,
    };
    let r = lr_sweep(&bases, &precisions, &grid, &budget, corpus)?;
    let rows: Vec<LrSweepRecord> = r
        .cells
        .iter()
        .map(|c| LrSweepRecord {
            arch: c.arch,
            precision: c.precision.clone(),
            lr: c.lr,
            bpb: c.bpb,
            diverged: c.diverged,
        })
        .collect();
    out.csv("lrsweep.csv", &rows)?;
    out.notes.push(format!(
        "desk-scale analog: {} steps of batch {} per cell",
        cfg.steps, cfg.batch_size
    ));
    let mut configs = Vec::new();
    for &a in &sw.archs {
        for p in &sw.precisions {
            configs.push(json!({
                "arch": a, "precision": p,
                "argmin_lr": r.argmin(a, p),
                "spread": r.spread(a, Some(p)),
            }));
        }
    }
    let spreads: serde_json::Map<String, serde_json::Value> = sw
        .archs
        .iter()
        .map(|&a| (a.to_string(), json!(r.spread(a, None))))
        .collect();
    out.json(
        "lrsweep_summary.json",
        &json!({
            "lr_grid": r.lr_grid,
            "steps": budget.steps,
            "seed": budget.seed,
            "spread": spreads,
            "configurations": configs,
            "divergent": r.divergent().count(),
        }),
    )
}

fn mlp(cfg: &ExperimentConfig, corpus: &Corpus, out: &mut Output) -> Result<(), ExperimentError> {
    let s = MlpSettings::from_config(cfg);
    let r = mlp_align(&s, corpus)?;
    let mut trace = Vec::new();
    let mut summary = Vec::new();
    for arm in &r.arms {
        for run in &arm.runs {
            trace.extend(
                run.trace
                    .iter()
                    .enumerate()
                    .map(|(step, &loss)| MlpTraceRecord {
                        arch: arm.arch,
                        seed: run.seed,
                        step,
                        loss,
                    }),
            );
            summary.push(MlpSummaryRecord {
                arch: arm.arch,
                seed: run.seed,
                val_loss: run.val_loss,
                rho_s: run.rho_s,
                rho_n: run.rho_n,
                rho_s_u: run.rho_s_gemm[0],
                rho_s_v: run.rho_s_gemm[1],
                rho_s_out: run.rho_s_gemm[2],
            });
        }
    }
    out.csv("mlp_trace.csv", &trace)?;
    out.csv("mlp_summary.csv", &summary)?;
    out.notes.push(
        "harness task: next-byte prediction through one gated MLP block over the mean embedding of the preceding bytes".into(),
    );
    out.json(
        "mlp_report.json",
        &json!({
            "width": s.width,
            "context": s.context,
            "steps": s.steps,
            "arms": r.arms.iter().map(|a| json!({
                "arch": a.arch,
                "rho_s_mean": a.rho_s_mean,
                "rho_s_ci95": [a.rho_s_ci.0, a.rho_s_ci.1],
                "val_loss_mean": a.val_loss_mean,
            })).collect::<Vec<_>>(),
            "loss_gap": r.loss_gap(),
            "intervals_separate": r.intervals_separate(),
        }),
    )
}

fn train(cfg: &ExperimentConfig, corpus: &Corpus, out: &mut Output) -> Result<(), ExperimentError> {
    let multi = cfg.seeds.len() > 1;
    for &seed in &cfg.seeds {
        let prefix = if multi {
            format!("seed{seed}_")
        } else {
            String::new()
        };
        let mut m = cfg.model.clone();
        m.seed = seed;
        let opts = TrainOptions {
            steps: cfg.steps,
            batch_size: cfg.batch_size,
            seed,
            eval_interval: cfg.eval_interval,
            val_batches: cfg.val_batches,
        };
        let o = train_model(ModelState::new(m)?, corpus, &opts)?;
        out.csv(&format!("{prefix}loss.csv"), &o.trace)?;
        out.csv(&format!("{prefix}eval.csv"), &o.evals)?;
        let name = format!("{prefix}model.ckpt");
        let p = out.path(&name);
        save_checkpoint(&o.state, &p)?;
        out.artifacts.push(name);
    }
    Ok(())
}

/// Run the configured experiment and write its artifacts, a config
/// snapshot and a manifest into `cfg.output_dir`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary, ExperimentError> {
    cfg.validate()?;
    let start = Instant::now();
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| ExperimentError::output(&dir, e))?;
    let mut out = Output {
        dir: dir.clone(),
        artifacts: Vec::new(),
        notes: Vec::new(),
    };
    let config = cfg.to_toml();
    out.text("config.toml", &config)?;
    let corpus = load_corpus(cfg, &mut out)?;
    match cfg.experiment {
        Experiment::Train => train(cfg, &corpus, &mut out)?,
        Experiment::AnalyzeSnr => analyze_snr(cfg, &corpus, &mut out)?,
        Experiment::Correlation => correlation(cfg, &corpus, &mut out)?,
        Experiment::ScalingCurve => scaling_curve(cfg, &corpus, &mut out)?,
        Experiment::Landscape => landscape(cfg, &corpus, &mut out)?,
        Experiment::LrSweep => sweep(cfg, &corpus, &mut out)?,
        Experiment::MlpAlign => mlp(cfg, &corpus, &mut out)?,
    }
    let mut manifest = Manifest {
        experiment: cfg.experiment.to_string(),
        config,
        seeds: cfg.seeds.clone(),
        data_checksum: corpus.checksum().to_string(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_s: start.elapsed().as_secs_f64(),
        artifacts: out.artifacts.clone(),
        notes: out.notes.clone(),
    };
    manifest.artifacts.push("manifest.json".into());
    let p = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&p, text).map_err(|e| ExperimentError::output(&p, e))?;
    Ok(RunSummary {
        out_dir: dir,
        manifest,
    })
}
