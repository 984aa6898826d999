//! Parameter layout shared by initialization, forward, optimizer and checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Arch, ModelConfig};
use crate::tensorcore::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamKind {
    /// Weight matrix stored `(out, in)`. `norm_axis` is the axis whose
    /// slices lie along the embedding dimension: 1 normalizes rows, 0 columns.
    Matrix { norm_axis: usize },
    /// RMSNorm gain.
    Gain,
    /// Reparameterized nGPT scale; effective value is `stored * factor`.
    Scalar { factor: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerSlots {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub w_u: usize,
    pub w_v: usize,
    pub w_down: usize,
    /// GPT: pre-attention gain. nGPT: alpha_A.
    pub attn_mix: usize,
    /// GPT: pre-MLP gain. nGPT: alpha_M.
    pub mlp_mix: usize,
    pub s_qk: Option<usize>,
    pub s_u: Option<usize>,
    pub s_v: Option<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub specs: Vec<ParamSpec>,
    pub emb: usize,
    pub head: usize,
    pub final_gain: Option<usize>,
    pub s_z: Option<usize>,
    pub layers: Vec<LayerSlots>,
}

pub(crate) const ALPHA_INIT: f64 = 0.05;

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let f = cfg.ffn_dim;
        let sd = (d as f64).sqrt();
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, kind| {
            specs.push(ParamSpec { name, shape, kind });
            specs.len() - 1
        };
        let rows = ParamKind::Matrix { norm_axis: 1 };
        let cols = ParamKind::Matrix { norm_axis: 0 };
        let ngpt = cfg.arch == Arch::Ngpt;

        let emb = add("emb".into(), vec![cfg.vocab_size, d], rows);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            let (attn_mix, mlp_mix) = if ngpt {
                let alpha = ParamKind::Scalar {
                    factor: ALPHA_INIT * sd,
                };
                (
                    add(p("alpha_a"), vec![d], alpha),
                    add(p("alpha_m"), vec![d], alpha),
                )
            } else {
                (
                    add(p("attn_gain"), vec![d], ParamKind::Gain),
                    add(p("mlp_gain"), vec![d], ParamKind::Gain),
                )
            };
            let wq = add(p("wq"), vec![d, d], rows);
            let wk = add(p("wk"), vec![d, d], rows);
            let wv = add(p("wv"), vec![d, d], rows);
            let wo = add(p("wo"), vec![d, d], cols);
            let w_u = add(p("w_u"), vec![f, d], rows);
            let w_v = add(p("w_v"), vec![f, d], rows);
            let w_down = add(p("w_down"), vec![d, f], cols);
            let (s_qk, s_u, s_v) = if ngpt {
                (
                    Some(add(p("s_qk"), vec![d], ParamKind::Scalar { factor: sd })),
                    Some(add(p("s_u"), vec![f], ParamKind::Scalar { factor: 1.0 })),
                    Some(add(p("s_v"), vec![f], ParamKind::Scalar { factor: 1.0 })),
                )
            } else {
                (None, None, None)
            };
            layers.push(LayerSlots {
                wq,
                wk,
                wv,
                wo,
                w_u,
                w_v,
                w_down,
                attn_mix,
                mlp_mix,
                s_qk,
                s_u,
                s_v,
            });
        }
        let final_gain = (!ngpt).then(|| add("final_gain".into(), vec![d], ParamKind::Gain));
        let head = add("head".into(), vec![cfg.vocab_size, d], rows);
        let s_z = ngpt.then(|| {
            add(
                "s_z".into(),
                vec![cfg.vocab_size],
                ParamKind::Scalar { factor: sd },
            )
        });
        Self {
            specs,
            emb,
            head,
            final_gain,
            s_z,
            layers,
        }
    }

    /// Fresh parameters, before any nGPT normalization.
    pub fn init(&self, cfg: &ModelConfig) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let residual_std = cfg.init_std / (2.0 * cfg.n_layers as f64).sqrt();
        self.specs
            .iter()
            .map(|s| match s.kind {
                ParamKind::Matrix { .. } => {
                    let gpt_out_proj = cfg.arch == Arch::Gpt
                        && (s.name.ends_with(".wo") || s.name.ends_with(".w_down"));
                    let std = if gpt_out_proj {
                        residual_std
                    } else {
                        cfg.init_std
                    };
                    Tensor::randn(&s.shape, std, &mut rng)
                }
                ParamKind::Gain => Tensor::full(&s.shape, 1.0),
                // stored init = 1 / factor so the effective value starts at
                // alpha_init for alphas and at 1 for the other scales
                ParamKind::Scalar { factor } => {
                    let target = if s.name.contains(".alpha_") {
                        ALPHA_INIT
                    } else {
                        1.0
                    };
                    Tensor::full(&s.shape, target / factor)
                }
            })
            .collect()
    }
}
