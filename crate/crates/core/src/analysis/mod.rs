//! Dot-product SNR analysis: stage-wise SNR of a quantized GEMM, the
//! signal/noise decomposition of a single dot product, effective pairwise
//! correlation of summed terms, and the closed-form width-scaling model.

mod correlation;
mod scaling;
mod signal;
mod snr;
mod synthetic;
mod theory;

pub use correlation::{
    bootstrap_ci, effective_correlation, gemm_correlation, gemm_partial_curve,
    partial_sum_correlation, Correlation, CorrelationStats, PartialCurve,
};
pub use scaling::{gemm_scaling, ScalingPoint};
pub use signal::{signal_noise, signal_noise_quantized, SignalNoiseStats};
pub(crate) use snr::measure;
pub use snr::{
    averaging_gain, quantize_operands, snr, stage_snr, LayerSnr, SnrReport, Stage, StageSnr,
};
pub use synthetic::{equicorrelated_rows, monte_carlo_snr, MonteCarloSnr};
pub use theory::{predict_snr, snr_ratio, snr_ratio_and_regimes, Regime, RegimeReport};

use std::fmt;

use thiserror::Error;

use crate::fpquant::QuantError;
use crate::tensorcore::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    Shape { left: Vec<usize>, right: Vec<usize> },
    #[error("reference tensor is all zero, SNR undefined")]
    ZeroSignal,
    #[error("products are constant (sigma_s = 0), normalization undefined")]
    ConstantProducts,
    #[error("need at least {need} {what}, got {got}")]
    TooFew {
        what: &'static str,
        need: usize,
        got: usize,
    },
    #[error("correlations must satisfy 0 < rho_gpt <= rho_ngpt <= 1, got ngpt {ngpt}, gpt {gpt}")]
    Correlations { ngpt: f64, gpt: f64 },
    #[error("zero denominator in SNR prediction")]
    ZeroDenominator,
    #[error("{0} stage SNR is infinite, gain undefined")]
    InfiniteStage(Stage),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Signal-to-noise ratio with an explicit infinite value for zero noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Finite(f64),
    Infinite,
}

impl Snr {
    pub fn from_ratio(r: f64) -> Self {
        if r.is_infinite() {
            Snr::Infinite
        } else {
            Snr::Finite(r)
        }
    }

    pub fn from_db(db: f64) -> Self {
        Snr::from_ratio(10f64.powf(db / 10.0))
    }

    /// Linear ratio, `f64::INFINITY` for the infinite case.
    pub fn ratio(self) -> f64 {
        match self {
            Snr::Finite(r) => r,
            Snr::Infinite => f64::INFINITY,
        }
    }

    /// `None` when infinite.
    pub fn db(self) -> Option<f64> {
        match self {
            Snr::Finite(r) => Some(10.0 * r.log10()),
            Snr::Infinite => None,
        }
    }

    /// dB value with infinity mapped to `f64::INFINITY`, for reports.
    pub fn db_or_inf(self) -> f64 {
        self.db().unwrap_or(f64::INFINITY)
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Snr::Finite(_))
    }

    /// Mean in dB; infinite if any input is.
    pub fn mean_db(values: &[Snr]) -> Option<Snr> {
        if values.is_empty() {
            return None;
        }
        let mut acc = 0.0;
        for v in values {
            match v.db() {
                Some(db) => acc += db,
                None => return Some(Snr::Infinite),
            }
        }
        Some(Snr::from_db(acc / values.len() as f64))
    }
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.db() {
            Some(db) => write!(f, "{db:.2} dB"),
            None => f.write_str("inf dB"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn db_round_trip() {
        let mut db = -100.0;
        while db <= 100.0 {
            let back = Snr::from_db(db).db().unwrap();
            assert!((back - db).abs() < 1e-12, "{db} -> {back}");
            db += 0.37;
        }
    }

    #[test]
    fn infinite_propagates_through_mean() {
        let m = Snr::mean_db(&[Snr::Finite(10.0), Snr::Infinite]).unwrap();
        assert_eq!(m, Snr::Infinite);
        let m = Snr::mean_db(&[Snr::Finite(10.0), Snr::Finite(1000.0)]).unwrap();
        assert!((m.db().unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(Snr::Infinite.db_or_inf(), f64::INFINITY);
    }
}
