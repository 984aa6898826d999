use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::analysis::Stage;
use crate::models::Arch;

/// `snr.csv`: stage SNR per block, averaged in dB over the block's GEMMs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrRecord {
    pub layer: usize,
    pub stage: Stage,
    /// `inf` when the stage is noise-free.
    pub snr_db: f64,
}

/// `snr_gemm.csv`: stage SNR of every block GEMM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GemmSnrRecord {
    pub layer: usize,
    pub gemm: String,
    pub stage: Stage,
    pub snr_db: f64,
}

/// `corr.csv`: per block, mean signal and noise correlation over its GEMMs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrRecord {
    pub layer: usize,
    pub rho_s: f64,
    pub rho_n: f64,
}

/// `partial.csv`: signal correlation of the first `k` terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialRecord {
    pub layer: usize,
    pub gemm: String,
    pub k: usize,
    pub rho: f64,
    pub se: f64,
}

/// `scaling.csv`: dot-product SNR against summation length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub arch: String,
    #[serde(rename = "D")]
    pub d: usize,
    pub empirical: f64,
    pub theory: f64,
}

/// `landscape.csv`: loss increase of one perturbation draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeRecord {
    pub arch: Arch,
    pub alpha: f64,
    pub seed: u64,
    pub delta: f64,
}

/// `lrsweep.csv`: one sweep cell; `bpb` is empty for divergent cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSweepRecord {
    pub arch: Arch,
    pub precision: String,
    pub lr: f64,
    pub bpb: Option<f64>,
    pub diverged: bool,
}

/// `loss.csv`: training loss per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// `eval.csv`: validation loss at evaluation steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub val_loss: f64,
    pub bpb: f64,
}

/// `mlp_trace.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpTraceRecord {
    pub arch: Arch,
    pub seed: u64,
    pub step: usize,
    pub loss: f64,
}

/// `mlp_summary.csv`: `rho_s` and `rho_n` are means over the three GEMMs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSummaryRecord {
    pub arch: Arch,
    pub seed: u64,
    pub val_loss: f64,
    pub rho_s: f64,
    pub rho_n: f64,
    pub rho_s_u: f64,
    pub rho_s_v: f64,
    pub rho_s_out: f64,
}

/// `manifest.json`: everything needed to rerun an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    /// Config snapshot as TOML text.
    pub config: String,
    pub seeds: Vec<u64>,
    pub data_checksum: String,
    pub code_version: String,
    pub wall_time_s: f64,
    pub artifacts: Vec<String>,
    /// Harness choices and warnings worth reading next to the numbers.
    pub notes: Vec<String>,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => ExperimentError::output(path, io),
        other => ExperimentError::Data(format!("{other:?}")),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| ExperimentError::output(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ExperimentError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<T>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn headers_match_documented_schema() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("snr.csv");
        write_csv(
            &p,
            &[SnrRecord {
                layer: 0,
                stage: Stage::Dot,
                snr_db: f64::INFINITY,
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("layer,stage,snr_db\n"), "{text}");
        let back: Vec<SnrRecord> = read_csv(&p).unwrap();
        assert_eq!(back[0].snr_db, f64::INFINITY);

        let p = dir.path().join("scaling.csv");
        write_csv(
            &p,
            &[ScalingRecord {
                arch: "gpt".into(),
                d: 16,
                empirical: 1.0,
                theory: 2.0,
            }],
        )
        .unwrap();
        assert!(std::fs::read_to_string(&p)
            .unwrap()
            .starts_with("arch,D,empirical,theory\n"));
    }

    #[test]
    fn divergent_cell_round_trips_with_empty_bpb() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lrsweep.csv");
        let rows = vec![
            LrSweepRecord {
                arch: Arch::Gpt,
                precision: "nvfp4".into(),
                lr: 0.01,
                bpb: None,
                diverged: true,
            },
            LrSweepRecord {
                arch: Arch::Ngpt,
                precision: "off".into(),
                lr: 1e-4,
                bpb: Some(2.5),
                diverged: false,
            },
        ];
        write_csv(&p, &rows).unwrap();
        assert_eq!(read_csv::<LrSweepRecord>(&p).unwrap(), rows);
    }

    #[test]
    fn unwritable_path_is_an_output_error() {
        let e = write_csv::<CorrRecord>(Path::new("/no/such/dir/x.csv"), &[]).unwrap_err();
        assert_eq!(e.exit_code(), 5);
    }
}
