use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::fpquant::QuantConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Gpt,
    Ngpt,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Gpt => "gpt",
            Arch::Ngpt => "ngpt",
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Arch {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gpt" => Ok(Arch::Gpt),
            "ngpt" => Ok(Arch::Ngpt),
            _ => Err(ModelError::Config {
                field: "arch",
                reason: format!("unknown architecture {s:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    /// `None` trains in full precision.
    #[serde(default)]
    pub quant: Option<QuantConfig>,
    /// Also quantize the two gradient GEMMs of every quantized linear layer.
    #[serde(default = "yes")]
    pub quantize_backward: bool,
    pub lr: f64,
    pub betas: (f64, f64),
    #[serde(default = "adam_eps")]
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_samples: usize,
    pub init_std: f64,
    pub seed: u64,
}

fn yes() -> bool {
    true
}

fn adam_eps() -> f64 {
    1e-8
}

impl ModelConfig {
    /// Desk-scale GPT: 4 layers, width 256, byte vocabulary.
    pub fn desk_gpt() -> Self {
        Self {
            arch: Arch::Gpt,
            n_layers: 4,
            d_model: 256,
            n_heads: 4,
            head_dim: 64,
            ffn_dim: 768,
            vocab_size: 256,
            seq_len: 256,
            quant: None,
            quantize_backward: true,
            lr: 1.2e-3,
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.1,
            warmup_samples: 2048,
            init_std: 0.02,
            seed: 0,
        }
    }

    /// Desk-scale nGPT: same shape, half the learning rate, no decay or warmup.
    pub fn desk_ngpt() -> Self {
        let mut c = Self::desk_gpt();
        c.arch = Arch::Ngpt;
        c.lr = 0.6e-3;
        c.weight_decay = 0.0;
        c.warmup_samples = 0;
        c.init_std = 1.0 / (c.d_model as f64).sqrt();
        c
    }

    pub fn desk(arch: Arch) -> Self {
        match arch {
            Arch::Gpt => Self::desk_gpt(),
            Arch::Ngpt => Self::desk_ngpt(),
        }
    }

    /// Shrink width keeping the head count, for tests.
    pub fn with_width(mut self, d_model: usize, n_heads: usize) -> Self {
        self.d_model = d_model;
        self.n_heads = n_heads;
        self.head_dim = d_model / n_heads;
        self.ffn_dim = 3 * d_model;
        if self.arch == Arch::Ngpt {
            self.init_std = 1.0 / (d_model as f64).sqrt();
        }
        self
    }

    pub fn with_quant(mut self, quant: Option<QuantConfig>) -> Self {
        self.quant = quant;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |field, reason: &str| {
            Err(ModelError::Config {
                field,
                reason: reason.to_string(),
            })
        };
        for (field, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
        ] {
            if v == 0 {
                return bad(field, "must be positive");
            }
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(ModelError::Config {
                field: "d_model",
                reason: format!(
                    "d_model {} != n_heads {} x head_dim {}",
                    self.d_model, self.n_heads, self.head_dim
                ),
            });
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive and finite");
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("betas", "must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std", "must be positive and finite");
        }
        if self.arch == Arch::Ngpt {
            if self.weight_decay != 0.0 {
                return bad("weight_decay", "nGPT trains without weight decay");
            }
            if self.warmup_samples != 0 {
                return bad("warmup_samples", "nGPT trains without warmup");
            }
        }
        if let Some(q) = &self.quant {
            q.validate()?;
        }
        Ok(())
    }
}
