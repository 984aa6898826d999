use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Corpus, ExperimentConfig, ExperimentError};
use crate::analysis::{bootstrap_ci, gemm_correlation, quantize_operands};
use crate::fpquant::{counter_hash, QuantConfig};
use crate::models::{AdamState, AdamW, Arch, ModelError};
use crate::tensorcore::{normalize_in_place, Tape, Tensor, Var};

const INIT_STREAM: u64 = 0x4d_4c50_494e;
const DATA_STREAM: u64 = 0x4d_4c50_4454;
const VOCAB: usize = 256;

/// Harness settings of the one-layer alignment study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSettings {
    pub width: usize,
    pub context: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr_gpt: f64,
    pub lr_ngpt: f64,
    pub eval_positions: usize,
    pub arms: Vec<Arch>,
    pub seeds: Vec<u64>,
    /// Quantizer used to split products into signal and noise.
    pub quant: QuantConfig,
}

impl MlpSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        let m = &cfg.mlp;
        Self {
            width: m.width,
            context: m.context,
            steps: m.steps,
            batch: m.batch,
            lr_gpt: m.lr_gpt,
            lr_ngpt: m.lr_ngpt,
            eval_positions: m.eval_positions,
            arms: m.arms.clone(),
            seeds: cfg.seeds.clone(),
            quant: cfg.quant.clone(),
        }
    }

    fn lr(&self, arch: Arch) -> f64 {
        match arch {
            Arch::Gpt => self.lr_gpt,
            Arch::Ngpt => self.lr_ngpt,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpRun {
    pub seed: u64,
    pub trace: Vec<f64>,
    pub val_loss: f64,
    /// Mean over the layer's three GEMMs.
    pub rho_s: f64,
    pub rho_n: f64,
    /// Signal correlation of the `u`, `v` and output GEMMs.
    pub rho_s_gemm: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpArm {
    pub arch: Arch,
    pub runs: Vec<MlpRun>,
    pub rho_s_mean: f64,
    /// 95% percentile-bootstrap interval of the mean over seeds.
    pub rho_s_ci: (f64, f64),
    pub val_loss_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpAlignReport {
    pub settings: MlpSettings,
    /// One entry per configured arm, in configuration order.
    pub arms: Vec<MlpArm>,
}

impl MlpAlignReport {
    pub fn arm(&self, arch: Arch) -> Option<&MlpArm> {
        self.arms.iter().find(|a| a.arch == arch)
    }

    /// `|a − b| / min(a, b)` of the mean held-out losses of the first two arms.
    pub fn loss_gap(&self) -> Option<f64> {
        let [a, b] = [self.arms.first()?, self.arms.get(1)?].map(|x| x.val_loss_mean);
        Some((a - b).abs() / a.min(b))
    }

    /// The two arms' intervals do not overlap.
    pub fn intervals_separate(&self) -> Option<bool> {
        let (a, b) = (self.arms.first()?.rho_s_ci, self.arms.get(1)?.rho_s_ci);
        Some(a.1 < b.0 || b.1 < a.0)
    }
}

/// Parameters: byte embedding, gate and value projections, output matrix,
/// and for nGPT the logit scale.
struct Mlp {
    arch: Arch,
    width: usize,
    params: Vec<Tensor>,
}

impl Mlp {
    fn new(arch: Arch, width: usize, seed: u64) -> Result<Self, ExperimentError> {
        let mut rng = ChaCha8Rng::seed_from_u64(counter_hash(seed, INIT_STREAM, 0));
        let std = match arch {
            Arch::Gpt => 0.02,
            Arch::Ngpt => 1.0 / (width as f64).sqrt(),
        };
        let mut params = vec![
            Tensor::randn(&[VOCAB, width], 1.0, &mut rng),
            Tensor::randn(&[width, width], std, &mut rng),
            Tensor::randn(&[width, width], std, &mut rng),
            Tensor::randn(&[VOCAB, width], std, &mut rng),
        ];
        if arch == Arch::Ngpt {
            params.push(Tensor::full(&[VOCAB], 1.0));
        }
        let mut m = Self {
            arch,
            width,
            params,
        };
        m.renormalize()?;
        Ok(m)
    }

    fn renormalize(&mut self) -> Result<(), ExperimentError> {
        if self.arch == Arch::Ngpt {
            for p in &mut self.params[..4] {
                normalize_in_place(p, 1).map_err(ModelError::from)?;
            }
        }
        Ok(())
    }

    /// Loss node, the normalized bag feeding `u` and `v`, and the hidden
    /// state feeding the output GEMM.
    fn forward(
        &self,
        t: &mut Tape,
        vars: &[Var],
        ctx: &[usize],
        targets: &[usize],
    ) -> Result<(Var, Var, Var), ExperimentError> {
        let mut f = || -> Result<(Var, Var, Var), crate::tensorcore::TensorError> {
            let b = targets.len();
            let c = ctx.len() / b;
            let e = t.embedding(vars[0], ctx)?;
            let mut avg = vec![0.0; b * b * c];
            for i in 0..b {
                for j in 0..c {
                    avg[i * b * c + i * c + j] = 1.0 / c as f64;
                }
            }
            let a = t.constant(Tensor::matrix(b, b * c, avg)?);
            let bag = t.matmul(a, e)?;
            let x = match self.arch {
                Arch::Gpt => t.rms_norm(bag, 1e-6)?,
                Arch::Ngpt => t.row_normalize(bag)?,
            };
            let u = t.linear(x, vars[1], None)?;
            let mut v = t.linear(x, vars[2], None)?;
            if self.arch == Arch::Ngpt {
                v = t.scale(v, (self.width as f64).sqrt())?;
            }
            let sv = t.silu(v)?;
            let mut h = t.mul(u, sv)?;
            if self.arch == Arch::Ngpt {
                h = t.row_normalize(h)?;
            }
            let mut logits = t.linear(h, vars[3], None)?;
            if self.arch == Arch::Ngpt {
                let sz = t.scale(vars[4], (self.width as f64).sqrt())?;
                logits = t.mul_row(logits, sz)?;
            }
            let loss = t.cross_entropy(logits, targets)?;
            Ok((loss, x, h))
        };
        Ok(f().map_err(ModelError::from)?)
    }

    fn loss(
        &self,
        ctx: &[usize],
        targets: &[usize],
    ) -> Result<(f64, Tensor, Tensor), ExperimentError> {
        let mut t = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| t.constant(p.clone())).collect();
        let (l, x, h) = self.forward(&mut t, &vars, ctx, targets)?;
        Ok((t.value(l).data()[0], t.value(x).clone(), t.value(h).clone()))
    }

    fn step(
        &mut self,
        ctx: &[usize],
        targets: &[usize],
        lr: f64,
        adam: &mut AdamState,
    ) -> Result<f64, ExperimentError> {
        let mut t = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| t.param(p.clone())).collect();
        let (l, _, _) = self.forward(&mut t, &vars, ctx, targets)?;
        let loss = t.value(l).data()[0];
        let g = t.backward(l).map_err(ModelError::from)?;
        let grads: Vec<Tensor> = vars.iter().map(|&v| g.tensor(v)).collect();
        let opt = AdamW {
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let decay = vec![false; self.params.len()];
        opt.step(lr, &mut self.params, &grads, &decay, adam);
        self.renormalize()?;
        Ok(loss)
    }
}

fn windows(
    bytes: &[u8],
    starts: impl Iterator<Item = usize>,
    c: usize,
) -> (Vec<usize>, Vec<usize>) {
    let (mut ctx, mut tgt) = (Vec::new(), Vec::new());
    for p in starts {
        ctx.extend(bytes[p - c..p].iter().map(|&b| b as usize));
        tgt.push(bytes[p] as usize);
    }
    (ctx, tgt)
}

fn run_arm(
    s: &MlpSettings,
    arch: Arch,
    seed: u64,
    corpus: &Corpus,
) -> Result<MlpRun, ExperimentError> {
    let c = s.context;
    let mut model = Mlp::new(arch, s.width, seed)?;
    let mut adam = AdamState::zeros(&model.params);
    let train = corpus.train();
    let mut trace = Vec::with_capacity(s.steps);
    for step in 0..s.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(counter_hash(seed, DATA_STREAM, step as u64));
        let starts: Vec<usize> = (0..s.batch)
            .map(|_| rng.random_range(c..train.len()))
            .collect();
        let (ctx, tgt) = windows(train, starts.into_iter(), c);
        let loss = model.step(&ctx, &tgt, s.lr(arch), &mut adam)?;
        if !loss.is_finite() {
            return Err(ExperimentError::Invariant(format!(
                "{arch} loss became {loss} at step {step}"
            )));
        }
        trace.push(loss);
    }
    let val = corpus.val();
    if val.len() < c + s.eval_positions {
        return Err(ExperimentError::Data(format!(
            "validation split of {} bytes is shorter than {} held-out positions",
            val.len(),
            c + s.eval_positions
        )));
    }
    let (ctx, tgt) = windows(val, c..c + s.eval_positions, c);
    let (val_loss, x, h) = model.loss(&ctx, &tgt)?;
    let p = &model.params;
    let mut rho_s_gemm = [0.0; 3];
    let mut rho_n = 0.0;
    for (i, (input, w)) in [(&x, &p[1]), (&x, &p[2]), (&h, &p[3])]
        .into_iter()
        .enumerate()
    {
        let (x_hat, w_hat) = quantize_operands(input, w, &s.quant)?;
        let c = gemm_correlation(input, w, &x_hat, &w_hat)?;
        rho_s_gemm[i] = c.rho_s;
        rho_n += c.rho_n / 3.0;
    }
    Ok(MlpRun {
        seed,
        trace,
        val_loss,
        rho_s: rho_s_gemm.iter().sum::<f64>() / 3.0,
        rho_n,
        rho_s_gemm,
    })
}

/// Train an unconstrained and a hypersphere-normalized one-layer gated MLP
/// on next-byte prediction from a bag of the preceding bytes, for every
/// seed, and measure the signal correlation of the layer's GEMM products
/// on held-out positions.
pub fn mlp_align(s: &MlpSettings, corpus: &Corpus) -> Result<MlpAlignReport, ExperimentError> {
    if s.width < 16 {
        return Err(ExperimentError::Config {
            field: "mlp.width".into(),
            reason: format!("width {} is below 16", s.width),
        });
    }
    if s.seeds.is_empty() || s.arms.is_empty() {
        return Err(ExperimentError::Config {
            field: "mlp".into(),
            reason: "needs at least one seed and one arm".into(),
        });
    }
    let jobs: Vec<(Arch, u64)> = s
        .arms
        .iter()
        .flat_map(|&a| s.seeds.iter().map(move |&seed| (a, seed)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(a, seed)| run_arm(s, a, seed, corpus))
        .collect::<Result<Vec<_>, _>>()?;
    let mut runs = runs.into_iter();
    let arms = s
        .arms
        .iter()
        .map(|&arch| {
            let runs: Vec<MlpRun> = runs.by_ref().take(s.seeds.len()).collect();
            let rhos: Vec<f64> = runs.iter().map(|r| r.rho_s).collect();
            let n = runs.len() as f64;
            MlpArm {
                arch,
                rho_s_mean: rhos.iter().sum::<f64>() / n,
                rho_s_ci: bootstrap_ci(&rhos, 0.95, 2000, 0),
                val_loss_mean: runs.iter().map(|r| r.val_loss).sum::<f64>() / n,
                runs,
            }
        })
        .collect();
    Ok(MlpAlignReport {
        settings: s.clone(),
        arms,
    })
}
