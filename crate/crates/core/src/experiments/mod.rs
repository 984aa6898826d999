//! Configuration, corpus handling, the one-layer MLP alignment study and
//! orchestration of every analysis into CSV artifacts.

mod config;
mod corpus;
mod mlp_align;
mod records;
mod run;
mod train;

pub use config::{
    apply_override, precision_quant, retarget, AnalysisSection, Experiment, ExperimentConfig,
    LandscapeSection, MlpSection, ScalingSection, SweepSection,
};
pub use corpus::{synthetic_text, Corpus, VAL_FRACTION};
pub use mlp_align::{mlp_align, MlpAlignReport, MlpArm, MlpRun, MlpSettings};
pub use records::{
    read_csv, write_csv, CorrRecord, EvalRecord, GemmSnrRecord, LandscapeRecord, LossRecord,
    LrSweepRecord, Manifest, MlpSummaryRecord, MlpTraceRecord, PartialRecord, ScalingRecord,
    SnrRecord,
};
pub use run::{analysis_taps, run, snr_records, RunSummary};
pub use train::{smoothed, train_matched, train_model, MatchedPair, TrainOptions, TrainOutcome};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::landscape::LandscapeError;
use crate::models::ModelError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("unknown experiment {0:?}")]
    UnknownExperiment(String),
    #[error("cannot write {}: {source}", path.display())]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("data: {0}")]
    Data(String),
    #[error("invariant check failed: {0}")]
    Invariant(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Landscape(#[from] LandscapeError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl ExperimentError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn output(path: &Path, source: std::io::Error) -> Self {
        ExperimentError::Output {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config { .. } => 3,
            ExperimentError::UnknownExperiment(_) => 4,
            ExperimentError::Output { .. } => 5,
            ExperimentError::Io { .. } | ExperimentError::Data(_) => 6,
            ExperimentError::Invariant(_) => 7,
            ExperimentError::Model(ModelError::Invariant(_)) => 7,
            ExperimentError::Landscape(LandscapeError::Data(e)) => e.exit_code(),
            ExperimentError::Landscape(LandscapeError::Model(ModelError::Invariant(_))) => 7,
            _ => 1,
        }
    }
}
