use std::fmt;

use serde::{Deserialize, Serialize};

use super::AnalysisError;

/// SNR of a sum of `d` terms whose signal parts have per-term standard
/// deviation `sigma_s` and effective correlation `rho_s`, and whose noise
/// parts are uncorrelated with per-term deviation `sigma_n`. `mu_s` and
/// `mu_n` are the means of the two sums.
pub fn predict_snr(
    d: f64,
    sigma_s: f64,
    sigma_n: f64,
    mu_s: f64,
    mu_n: f64,
    rho_s: f64,
) -> Result<f64, AnalysisError> {
    if !(d >= 1.0) {
        return Err(AnalysisError::Invalid(format!(
            "D must be at least 1, got {d}"
        )));
    }
    // both sums divided by D, so ρ = 0 with zero means is exactly σ_s²/σ_n²
    let num = sigma_s * sigma_s * (1.0 + (d - 1.0) * rho_s) + mu_s * mu_s / d;
    let den = sigma_n * sigma_n + mu_n * mu_n / d;
    if den == 0.0 {
        return Err(AnalysisError::ZeroDenominator);
    }
    Ok(num / den)
}

/// `(1 + D ρ_ngpt) / (1 + D ρ_gpt)`.
pub fn snr_ratio(d: f64, rho_ngpt: f64, rho_gpt: f64) -> f64 {
    (1.0 + d * rho_ngpt) / (1.0 + d * rho_gpt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Width below `1/ρ_ngpt`: ratio near 1.
    I,
    /// Between the transitions: ratio grows linearly.
    II,
    /// Width above `1/ρ_gpt`: ratio saturates.
    III,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::I => "I",
            Regime::II => "II",
            Regime::III => "III",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeReport {
    pub rho_ngpt: f64,
    pub rho_gpt: f64,
    /// `1/ρ_ngpt`.
    pub t1: f64,
    /// `1/ρ_gpt`.
    pub t2: f64,
    /// `ρ_ngpt / ρ_gpt`, the large-width limit of the ratio.
    pub saturation: f64,
    /// `(D, ratio, regime)` for each requested width.
    pub curve: Vec<(f64, f64, Regime)>,
}

impl RegimeReport {
    pub fn classify(&self, d: f64) -> Regime {
        if d < self.t1 {
            Regime::I
        } else if d <= self.t2 {
            Regime::II
        } else {
            Regime::III
        }
    }

    pub fn ratio(&self, d: f64) -> f64 {
        snr_ratio(d, self.rho_ngpt, self.rho_gpt)
    }
}

/// Transition widths, saturation and the predicted SNR ratio over `widths`.
/// Equal correlations give the constant curve 1.
pub fn snr_ratio_and_regimes(
    rho_ngpt: f64,
    rho_gpt: f64,
    widths: &[f64],
) -> Result<RegimeReport, AnalysisError> {
    if !(rho_gpt > 0.0 && rho_gpt <= rho_ngpt && rho_ngpt <= 1.0) {
        return Err(AnalysisError::Correlations {
            ngpt: rho_ngpt,
            gpt: rho_gpt,
        });
    }
    let mut r = RegimeReport {
        rho_ngpt,
        rho_gpt,
        t1: 1.0 / rho_ngpt,
        t2: 1.0 / rho_gpt,
        saturation: rho_ngpt / rho_gpt,
        curve: Vec::with_capacity(widths.len()),
    };
    r.curve = widths
        .iter()
        .map(|&d| (d, r.ratio(d), r.classify(d)))
        .collect();
    Ok(r)
}
