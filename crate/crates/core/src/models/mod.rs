//! GPT and nGPT language models at desk scale, their optimizer, and
//! checkpoints.
//!
//! Both architectures share one parameter layout convention: weight
//! matrices are stored `(out, in)` and every block GEMM runs through
//! [`Tape::linear`], so quantization and analysis taps see the same
//! operands in both models. Embeddings and the output head are never
//! quantized.

mod checkpoint;
mod config;
mod forward;
mod optim;
mod params;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
};
pub use config::{Arch, ModelConfig};
pub use forward::HIDDEN_NORM_TOL;
pub use optim::{AdamState, AdamW};
pub use params::{ParamKind, ParamSpec};

use thiserror::Error;

use crate::fpquant::QuantError;
use crate::tensorcore::{
    grad_check, normalize_in_place, GradCheckOptions, GradCheckReport, Tape, Tensor, TensorError,
    Var,
};
use params::Layout;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("token {token} at position {index} is outside the vocabulary of {vocab}")]
    Token {
        index: usize,
        token: usize,
        vocab: usize,
    },
    #[error("{len} tokens do not form sequences of length {seq} (max {max})")]
    Sequence { len: usize, seq: usize, max: usize },
    #[error("{}: {source}", match .layer { Some(l) => format!("layer {l}"), None => "outside blocks".to_string() })]
    Tensor {
        layer: Option<usize>,
        #[source]
        source: TensorError,
    },
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error("baseline loss must be positive, got {0}")]
    NonPositiveBaseline(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ModelError {
    pub(crate) fn at(layer: Option<usize>, source: TensorError) -> Self {
        ModelError::Tensor { layer, source }
    }

    /// Layer in which a tensor error (such as a non-finite activation) arose.
    pub fn layer(&self) -> Option<usize> {
        match self {
            ModelError::Tensor { layer, .. } => *layer,
            _ => None,
        }
    }
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::at(None, e)
    }
}

/// `(loss_quant - loss_base) / loss_base`.
pub fn relative_error(loss_quant: f64, loss_base: f64) -> Result<f64, ModelError> {
    if !(loss_base > 0.0) {
        return Err(ModelError::NonPositiveBaseline(loss_base));
    }
    Ok((loss_quant - loss_base) / loss_base)
}

/// Next-token training batch: `inputs` and `targets` hold
/// `inputs.len() / seq` sequences back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub seq: usize,
}

impl Batch {
    /// Build from windows of `seq + 1` tokens each.
    pub fn from_windows<W: AsRef<[usize]>>(windows: &[W]) -> Self {
        let seq = windows
            .first()
            .map_or(0, |w| w.as_ref().len().saturating_sub(1));
        let mut inputs = Vec::with_capacity(windows.len() * seq);
        let mut targets = Vec::with_capacity(windows.len() * seq);
        for w in windows {
            let w = w.as_ref();
            assert_eq!(w.len(), seq + 1, "windows must share one length");
            inputs.extend_from_slice(&w[..seq]);
            targets.extend_from_slice(&w[1..]);
        }
        Self {
            inputs,
            targets,
            seq,
        }
    }

    pub fn sequences(&self) -> usize {
        if self.seq == 0 {
            0
        } else {
            self.inputs.len() / self.seq
        }
    }
}

/// Operands of one block GEMM, copied out of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tap {
    pub layer: usize,
    pub gemm: &'static str,
    /// Input activations `(tokens, in)`.
    pub x: Tensor,
    /// Weight `(out, in)`.
    pub w: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TapBundle {
    pub gemms: Vec<Tap>,
    /// Residual stream `(tokens, d_model)` after each block.
    pub hidden: Vec<Tensor>,
}

/// Effective nGPT scale vectors, per layer where applicable.
#[derive(Debug, Clone, PartialEq)]
pub struct NGptScalars {
    pub alpha_a: Vec<Vec<f64>>,
    pub alpha_m: Vec<Vec<f64>>,
    pub s_qk: Vec<Vec<f64>>,
    pub s_u: Vec<Vec<f64>>,
    pub s_v: Vec<Vec<f64>>,
    pub s_z: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelState {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Tensor>,
    pub adam: AdamState,
    /// Optimizer steps taken.
    pub step: u64,
}

impl ModelState {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = layout.init(&config);
        let adam = AdamState::zeros(&params);
        let mut s = Self {
            config,
            layout,
            params,
            adam,
            step: 0,
        };
        if s.config.arch == Arch::Ngpt {
            s.renormalize_weights()?;
        }
        Ok(s)
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        params: Vec<Tensor>,
        adam: AdamState,
        step: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.specs.len()
            || params
                .iter()
                .zip(&layout.specs)
                .any(|(p, s)| p.shape() != s.shape.as_slice())
        {
            return Err(ModelError::Checkpoint(
                "tensors do not match the config layout".into(),
            ));
        }
        Ok(Self {
            config,
            layout,
            params,
            adam,
            step,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Optimizer steps applied so far.
    pub fn steps_taken(&self) -> usize {
        self.step as usize
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.layout.specs
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Mutable parameters. nGPT callers are responsible for restoring the
    /// unit-norm invariant if they need it.
    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.layout
            .specs
            .iter()
            .position(|s| s.name == name)
            .map(|i| &self.params[i])
    }

    /// Replace the quantization setting, keeping weights and optimizer state.
    pub fn set_quant(
        &mut self,
        quant: Option<crate::fpquant::QuantConfig>,
    ) -> Result<(), ModelError> {
        if let Some(q) = &quant {
            q.validate()?;
        }
        self.config.quant = quant;
        Ok(())
    }

    /// Indices of 2-D weight matrices.
    pub fn matrix_indices(&self) -> Vec<usize> {
        self.layout
            .specs
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s.kind, ParamKind::Matrix { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Logits `(tokens, vocab)` and, when `taps` is set, copies of every
    /// block-GEMM operand pair and of the residual stream.
    pub fn forward(
        &self,
        ids: &[usize],
        seq: usize,
        taps: bool,
    ) -> Result<(Tensor, Option<TapBundle>), ModelError> {
        let mut t = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| t.constant(p.clone())).collect();
        let built = forward::build(
            &mut t,
            &self.config,
            &self.layout,
            &vars,
            ids,
            seq,
            self.step,
        )?;
        let bundle = taps.then(|| TapBundle {
            gemms: built
                .gemms
                .iter()
                .map(|&(layer, gemm, x, w)| Tap {
                    layer,
                    gemm,
                    x: t.value(x).clone(),
                    w: t.value(w).clone(),
                })
                .collect(),
            hidden: built.hidden.iter().map(|&h| t.value(h).clone()).collect(),
        });
        Ok((t.value(built.logits).clone(), bundle))
    }

    /// Mean cross-entropy in nats per token, without updating anything.
    pub fn loss(&self, batch: &Batch) -> Result<f64, ModelError> {
        let mut t = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| t.constant(p.clone())).collect();
        let built = forward::build(
            &mut t,
            &self.config,
            &self.layout,
            &vars,
            &batch.inputs,
            batch.seq,
            self.step,
        )?;
        let l = t
            .cross_entropy(built.logits, &batch.targets)
            .map_err(|e| ModelError::at(None, e))?;
        Ok(t.value(l).data()[0])
    }

    /// Loss and parameter gradients for `batch`.
    pub fn gradients(&self, batch: &Batch) -> Result<(f64, Vec<Tensor>), ModelError> {
        let mut t = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| t.param(p.clone())).collect();
        let built = forward::build(
            &mut t,
            &self.config,
            &self.layout,
            &vars,
            &batch.inputs,
            batch.seq,
            self.step,
        )?;
        let l = t
            .cross_entropy(built.logits, &batch.targets)
            .map_err(|e| ModelError::at(None, e))?;
        let loss = t.value(l).data()[0];
        let g = t.backward(l)?;
        Ok((loss, vars.iter().map(|&v| g.tensor(v)).collect()))
    }

    /// Finite-difference check of [`ModelState::gradients`] on `batch`.
    pub fn grad_check(
        &self,
        batch: &Batch,
        opts: &GradCheckOptions,
    ) -> Result<GradCheckReport, ModelError> {
        grad_check(
            &self.params,
            |t, vars| {
                let built = forward::build(
                    t,
                    &self.config,
                    &self.layout,
                    vars,
                    &batch.inputs,
                    batch.seq,
                    self.step,
                )?;
                t.cross_entropy(built.logits, &batch.targets)
                    .map_err(|e| ModelError::at(None, e))
            },
            opts,
        )
    }

    /// Learning rate for the next step, including linear warmup.
    pub fn current_lr(&self, sequences_per_step: usize) -> f64 {
        let c = &self.config;
        if c.warmup_samples == 0 {
            return c.lr;
        }
        let seen = (self.step + 1) as f64 * sequences_per_step as f64;
        c.lr * (seen / c.warmup_samples as f64).min(1.0)
    }

    /// One AdamW step; returns the pre-update loss. nGPT weights are
    /// renormalized afterwards.
    pub fn train_step(&mut self, batch: &Batch) -> Result<f64, ModelError> {
        let (loss, grads) = self.gradients(batch)?;
        if !loss.is_finite() {
            return Err(ModelError::Invariant(format!("non-finite loss {loss}")));
        }
        self.apply_gradients(&grads, self.current_lr(batch.sequences()))?;
        Ok(loss)
    }

    /// AdamW update with explicit gradients and learning rate.
    pub fn apply_gradients(&mut self, grads: &[Tensor], lr: f64) -> Result<(), ModelError> {
        let opt = AdamW {
            betas: self.config.betas,
            eps: self.config.eps,
            weight_decay: self.config.weight_decay,
        };
        let decay: Vec<bool> = self
            .layout
            .specs
            .iter()
            .map(|s| matches!(s.kind, ParamKind::Matrix { .. }))
            .collect();
        opt.step(lr, &mut self.params, grads, &decay, &mut self.adam);
        self.step += 1;
        if self.config.arch == Arch::Ngpt {
            self.renormalize_weights()?;
        }
        Ok(())
    }

    /// Unit-normalize every weight matrix along the embedding dimension.
    pub fn renormalize_weights(&mut self) -> Result<(), ModelError> {
        for (s, p) in self.layout.specs.iter().zip(self.params.iter_mut()) {
            if let ParamKind::Matrix { norm_axis } = s.kind {
                normalize_in_place(p, norm_axis).map_err(|e| match e {
                    TensorError::ZeroNorm { slice, norm } => {
                        ModelError::Invariant(format!("{} slice {slice} has norm {norm:e}", s.name))
                    }
                    other => ModelError::from(other),
                })?;
            }
        }
        Ok(())
    }

    /// Largest `| ||slice|| - 1 |` over all weight matrices' embedding slices.
    pub fn weight_norm_deviation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (s, p) in self.layout.specs.iter().zip(&self.params) {
            if let ParamKind::Matrix { norm_axis } = s.kind {
                let (r, c) = (p.shape()[0], p.shape()[1]);
                let d = p.data();
                let norms: Vec<f64> = if norm_axis == 1 {
                    d.chunks(c)
                        .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
                        .collect()
                } else {
                    (0..c)
                        .map(|j| (0..r).map(|i| d[i * c + j].powi(2)).sum::<f64>().sqrt())
                        .collect()
                };
                for n in norms {
                    worst = worst.max((n - 1.0).abs());
                }
            }
        }
        worst
    }

    /// Effective nGPT scales; `None` for GPT.
    pub fn ngpt_scalars(&self) -> Option<NGptScalars> {
        if self.config.arch != Arch::Ngpt {
            return None;
        }
        let eff = |i: usize| {
            let ParamKind::Scalar { factor } = self.layout.specs[i].kind else {
                unreachable!("scalar slot")
            };
            self.params[i]
                .data()
                .iter()
                .map(|v| v * factor)
                .collect::<Vec<f64>>()
        };
        let abs = |v: Vec<f64>| v.into_iter().map(f64::abs).collect::<Vec<f64>>();
        let ls = &self.layout.layers;
        Some(NGptScalars {
            alpha_a: ls.iter().map(|l| abs(eff(l.attn_mix))).collect(),
            alpha_m: ls.iter().map(|l| abs(eff(l.mlp_mix))).collect(),
            s_qk: ls.iter().map(|l| eff(l.s_qk.expect("ngpt"))).collect(),
            s_u: ls.iter().map(|l| eff(l.s_u.expect("ngpt"))).collect(),
            s_v: ls
                .iter()
                .map(|l| {
                    let sd = (self.config.d_model as f64).sqrt();
                    eff(l.s_v.expect("ngpt"))
                        .into_iter()
                        .map(|v| v * sd)
                        .collect()
                })
                .collect(),
            s_z: eff(self.layout.s_z.expect("ngpt")),
        })
    }

    /// FNV-style digest over all parameters.
    pub fn checksum(&self) -> u64 {
        self.params.iter().fold(0xcbf2_9ce4_8422_2325, |h, p| {
            (h ^ p.checksum()).wrapping_mul(0x100_0000_01b3)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fpquant::QuantConfig;

    fn tiny(arch: Arch) -> ModelConfig {
        let mut c = ModelConfig::desk(arch).with_width(32, 2);
        c.n_layers = 2;
        c.seq_len = 16;
        c
    }

    fn batch(seq: usize, n: usize, salt: usize) -> Batch {
        let w: Vec<Vec<usize>> = (0..n)
            .map(|b| {
                (0..=seq)
                    .map(|i| (i * 7 + b * 13 + salt) % 64 + 32)
                    .collect()
            })
            .collect();
        Batch::from_windows(&w)
    }

    #[test]
    fn relative_error_table_values() {
        assert!((relative_error(1.52, 1.47).unwrap() - 0.0340).abs() < 1e-4);
        assert!((relative_error(1.50, 1.46).unwrap() - 0.0274).abs() < 1e-4);
        assert_eq!(relative_error(1.3, 1.3).unwrap(), 0.0);
        assert!(matches!(
            relative_error(1.0, 0.0),
            Err(ModelError::NonPositiveBaseline(_))
        ));
    }

    #[test]
    fn ngpt_init_is_on_the_sphere() {
        let s = ModelState::new(tiny(Arch::Ngpt)).unwrap();
        assert!(s.weight_norm_deviation() < 1e-12);
        let (_, taps) = s.forward(&[1, 2, 3, 4, 5, 6, 7, 8], 4, true).unwrap();
        for h in taps.unwrap().hidden {
            for r in 0..h.rows() {
                let n = h.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_alpha_is_a_fixed_point() {
        let mut s = ModelState::new(tiny(Arch::Ngpt)).unwrap();
        let idx: Vec<usize> = s
            .specs()
            .iter()
            .enumerate()
            .filter(|(_, p)| p.name.contains("alpha"))
            .map(|(i, _)| i)
            .collect();
        for i in idx {
            s.params_mut()[i] = Tensor::zeros(s.params()[i].shape());
        }
        let ids = [3, 1, 4, 1, 5, 9, 2, 6];
        let (_, taps) = s.forward(&ids, 8, true).unwrap();
        let taps = taps.unwrap();
        let emb = s.param("emb").unwrap();
        let h0 = crate::tensorcore::row_normalize(
            &Tensor::new(
                vec![8, 32],
                ids.iter().flat_map(|&i| emb.row(i).to_vec()).collect(),
            )
            .unwrap(),
            1,
        )
        .unwrap();
        for h in &taps.hidden {
            for (a, b) in h.data().iter().zip(h0.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bad_token_rejected() {
        let s = ModelState::new(tiny(Arch::Gpt)).unwrap();
        assert!(matches!(
            s.forward(&[1, 300], 2, false),
            Err(ModelError::Token {
                index: 1,
                token: 300,
                ..
            })
        ));
        assert!(matches!(
            s.forward(&[1; 17], 17, false),
            Err(ModelError::Sequence { .. })
        ));
    }

    #[test]
    fn taps_cover_every_block_gemm() {
        let s = ModelState::new(tiny(Arch::Gpt)).unwrap();
        let (_, taps) = s.forward(&[1, 2, 3, 4], 4, true).unwrap();
        let t = taps.unwrap();
        assert_eq!(t.gemms.len(), 7 * 2);
        assert_eq!(t.gemms[0].gemm, "wq");
        assert_eq!(t.gemms[0].x.shape(), &[4, 32]);
        assert_eq!(t.gemms[6].w.shape(), &[32, 96]);
    }

    #[test]
    fn training_reduces_loss_and_keeps_sphere() {
        for arch in [Arch::Gpt, Arch::Ngpt] {
            let mut c = tiny(arch);
            c.lr *= 4.0;
            c.warmup_samples = 0;
            let mut s = ModelState::new(c).unwrap();
            let b = batch(16, 4, 0);
            let first = s.loss(&b).unwrap();
            for _ in 0..30 {
                s.train_step(&b).unwrap();
                if arch == Arch::Ngpt {
                    assert!(s.weight_norm_deviation() < 1e-6);
                }
            }
            let last = s.loss(&b).unwrap();
            assert!(last < first - 0.5, "{arch}: {first} -> {last}");
            assert_eq!(s.step, 30);
        }
    }

    #[test]
    fn quantized_training_is_deterministic() {
        let c = tiny(Arch::Gpt).with_quant(Some(QuantConfig::nvfp4_full()));
        let run = || {
            let mut s = ModelState::new(c.clone()).unwrap();
            (0..3)
                .map(|i| s.train_step(&batch(16, 2, i)).unwrap())
                .collect::<Vec<f64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn renormalize_direction_and_idempotence() {
        let mut s = ModelState::new(tiny(Arch::Ngpt)).unwrap();
        let before = s.params().to_vec();
        s.renormalize_weights().unwrap();
        for (a, b) in before.iter().zip(s.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let i = s.matrix_indices()[1];
        let orig = s.params()[i].clone();
        s.params_mut()[i] = orig.map(|v| 3.0 * v);
        s.renormalize_weights().unwrap();
        for (x, y) in orig.data().iter().zip(s.params()[i].data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let i0 = s.matrix_indices()[0];
        s.params_mut()[i0] = Tensor::zeros(s.params()[i0].shape());
        assert!(matches!(
            s.renormalize_weights(),
            Err(ModelError::Invariant(_))
        ));
    }
}
