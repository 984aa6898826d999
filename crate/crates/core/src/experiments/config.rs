use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::fpquant::QuantConfig;
use crate::models::{Arch, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Train,
    AnalyzeSnr,
    Correlation,
    ScalingCurve,
    Landscape,
    LrSweep,
    MlpAlign,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::Train,
        Experiment::AnalyzeSnr,
        Experiment::Correlation,
        Experiment::ScalingCurve,
        Experiment::Landscape,
        Experiment::LrSweep,
        Experiment::MlpAlign,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Train => "train",
            Experiment::AnalyzeSnr => "analyze-snr",
            Experiment::Correlation => "correlation",
            Experiment::ScalingCurve => "scaling-curve",
            Experiment::Landscape => "landscape",
            Experiment::LrSweep => "lr-sweep",
            Experiment::MlpAlign => "mlp-align",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| ExperimentError::UnknownExperiment(s.to_string()))
    }
}

/// Quantization recipe by name: `off`, `nvfp4` (per-tensor scale, Hadamard
/// transform, stochastic gradient rounding), `nvfp4-lean` (neither tensor
/// scale nor transform) and `nvfp4-nearest` (nearest rounding everywhere).
pub fn precision_quant(name: &str) -> Result<Option<QuantConfig>, ExperimentError> {
    match name {
        "off" => Ok(None),
        "nvfp4" => Ok(Some(QuantConfig::nvfp4_full())),
        "nvfp4-lean" => Ok(Some(QuantConfig::nvfp4_lean())),
        "nvfp4-nearest" => Ok(Some(QuantConfig::nvfp4())),
        _ => Err(ExperimentError::Config {
            field: "precision".into(),
            reason: format!("unknown precision {name:?}"),
        }),
    }
}

/// `model` converted to `arch`, keeping its shape, learning rate,
/// quantization and seed and taking the architecture's own defaults for
/// decay, warmup and init scale.
pub fn retarget(model: &ModelConfig, arch: Arch) -> ModelConfig {
    let d = ModelConfig::desk(arch);
    let mut m = model.clone();
    m.arch = arch;
    m.weight_decay = d.weight_decay;
    m.warmup_samples = d.warmup_samples;
    m.init_std = match arch {
        Arch::Gpt => d.init_std,
        Arch::Ngpt => 1.0 / (m.d_model as f64).sqrt(),
    };
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Bootstrap resamples for partial-sum error bars.
    pub bootstrap: usize,
    /// Partial-sum lengths; defaults to powers of two from 16 to `d_model`.
    pub k_grid: Option<Vec<usize>>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            bootstrap: 50,
            k_grid: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeSection {
    pub alpha_grid: Vec<f64>,
    pub noise_seeds: usize,
    pub gpt_checkpoint: Option<PathBuf>,
    pub ngpt_checkpoint: Option<PathBuf>,
}

impl Default for LandscapeSection {
    fn default() -> Self {
        Self {
            alpha_grid: vec![0.0, 0.02, 0.05, 0.1, 0.2],
            noise_seeds: 10,
            gpt_checkpoint: None,
            ngpt_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub lr_min: f64,
    pub lr_max: f64,
    pub points: usize,
    pub archs: Vec<Arch>,
    pub precisions: Vec<String>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            lr_min: 1e-4,
            lr_max: 1e-2,
            points: 8,
            archs: vec![Arch::Gpt, Arch::Ngpt],
            precisions: vec!["off".into(), "nvfp4".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpSection {
    /// Hidden width of the gated block, also the length of the analysed
    /// dot products.
    pub width: usize,
    /// Number of preceding bytes averaged into the input.
    pub context: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr_gpt: f64,
    pub lr_ngpt: f64,
    /// Held-out positions used for the correlation estimate.
    pub eval_positions: usize,
    /// Run order of the two arms; swapping it swaps the report columns.
    pub arms: Vec<Arch>,
}

impl Default for MlpSection {
    fn default() -> Self {
        Self {
            width: 64,
            context: 8,
            steps: 1000,
            batch: 64,
            lr_gpt: 3e-3,
            lr_ngpt: 3e-3,
            eval_positions: 1024,
            arms: vec![Arch::Gpt, Arch::Ngpt],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingSection {
    /// Summation lengths; defaults to powers of two from 16 to `d_model`.
    pub widths: Option<Vec<usize>>,
    /// When set, simulate equi-correlated products with this correlation
    /// instead of reading a model.
    pub synthetic_rho: Option<f64>,
    pub draws: usize,
    /// Correlation pair for the regime metadata.
    pub rho_ngpt: Option<f64>,
    pub rho_gpt: Option<f64>,
}

impl Default for ScalingSection {
    fn default() -> Self {
        Self {
            widths: None,
            synthetic_rho: None,
            draws: 10_000,
            rho_ngpt: None,
            rho_gpt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub model: ModelConfig,
    /// Quantizer applied by the analyses (the model's own `quant` governs
    /// training).
    #[serde(default = "QuantConfig::nvfp4")]
    pub quant: QuantConfig,
    /// UTF-8 text corpus; a synthetic grammar corpus is generated when
    /// absent.
    #[serde(default)]
    pub data_path: Option<PathBuf>,
    #[serde(default = "default_synthetic_bytes")]
    pub synthetic_bytes: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    /// Sequences in the held-out analysis batch.
    pub analysis_batch: usize,
    /// Validation batches of `batch_size` sequences per evaluation.
    #[serde(default = "default_val_batches")]
    pub val_batches: usize,
    pub seeds: Vec<u64>,
    /// Trained state to analyse; a fresh initialization when absent.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub landscape: LandscapeSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub mlp: MlpSection,
    #[serde(default)]
    pub scaling: ScalingSection,
}

fn default_synthetic_bytes() -> usize {
    1 << 20
}

fn default_val_batches() -> usize {
    4
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    /// Desk-scale preset for `arch` with a named precision (see
    /// [`precision_quant`]).
    pub fn preset(arch: Arch, precision: &str) -> Result<Self, ExperimentError> {
        let model = ModelConfig::desk(arch).with_quant(precision_quant(precision)?);
        Ok(Self {
            experiment: Experiment::Train,
            model,
            quant: QuantConfig::nvfp4(),
            data_path: None,
            synthetic_bytes: default_synthetic_bytes(),
            output_dir: PathBuf::from(format!("runs/desk-{arch}-{precision}")),
            steps: 200,
            batch_size: 8,
            eval_interval: 50,
            analysis_batch: 4,
            val_batches: default_val_batches(),
            seeds: vec![0],
            checkpoint: None,
            analysis: AnalysisSection::default(),
            landscape: LandscapeSection::default(),
            sweep: SweepSection::default(),
            mlp: MlpSection::default(),
            scaling: ScalingSection::default(),
        })
    }

    /// Every shipped preset as `(file stem, config)`.
    pub fn presets() -> Vec<(String, Self)> {
        let mut out = Vec::new();
        for arch in [Arch::Gpt, Arch::Ngpt] {
            for p in ["off", "nvfp4", "nvfp4-lean"] {
                out.push((
                    format!("desk-{arch}-{p}"),
                    Self::preset(arch, p).expect("known precision"),
                ));
            }
        }
        out
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ExperimentError> {
        let mut table: toml::Table =
            text.parse()
                .map_err(|e: toml::de::Error| ExperimentError::Config {
                    field: "<file>".into(),
                    reason: e.to_string(),
                })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ExperimentError::Config {
                field: "<file>".into(),
                reason: e.message().to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.model.validate().map_err(|e| match e {
            crate::models::ModelError::Config { field, reason } => ExperimentError::Config {
                field: format!("model.{field}"),
                reason,
            },
            other => ExperimentError::Config {
                field: "model".into(),
                reason: other.to_string(),
            },
        })?;
        self.quant.validate().map_err(|e| ExperimentError::Config {
            field: "quant".into(),
            reason: e.to_string(),
        })?;
        let bad = |field: &str, reason: &str| {
            Err(ExperimentError::Config {
                field: field.into(),
                reason: reason.into(),
            })
        };
        for (field, v) in [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("eval_interval", self.eval_interval),
            ("analysis_batch", self.analysis_batch),
            ("val_batches", self.val_batches),
        ] {
            if v == 0 {
                return bad(field, "must be positive");
            }
        }
        if self.seeds.is_empty() {
            return bad("seeds", "must list at least one seed");
        }
        for (field, p) in [
            ("data_path", &self.data_path),
            ("checkpoint", &self.checkpoint),
            ("landscape.gpt_checkpoint", &self.landscape.gpt_checkpoint),
            ("landscape.ngpt_checkpoint", &self.landscape.ngpt_checkpoint),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return bad(field, &format!("{} does not exist", p.display()));
                }
            }
        }
        if self.mlp.width < 16 {
            return bad("mlp.width", "must be at least 16");
        }
        for p in &self.sweep.precisions {
            precision_quant(p)?;
        }
        Ok(())
    }
}

/// Set `a.b.c = value` in a TOML table. The value is parsed as a TOML
/// literal and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ExperimentError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ExperimentError::Config {
            field: assignment.into(),
            reason: "override must look like key=value".into(),
        })?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ExperimentError::Config {
                field: key.into(),
                reason: format!("`{p}` is not a table"),
            })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
