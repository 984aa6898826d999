use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{predict_snr, AnalysisError, Snr};
use crate::tensorcore::Tensor;

/// `(samples, d)` matrix whose columns share pairwise correlation `rho`:
/// `mean + sigma (√ρ z_i + √(1−ρ) z_ik)`.
pub fn equicorrelated_rows(
    samples: usize,
    d: usize,
    rho: f64,
    sigma: f64,
    mean: f64,
    seed: u64,
) -> Tensor {
    assert!((0.0..=1.0).contains(&rho), "rho must lie in [0, 1]");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
    let mut data = Vec::with_capacity(samples * d);
    for _ in 0..samples {
        let shared: f64 = StandardNormal.sample(&mut rng);
        for _ in 0..d {
            let own: f64 = StandardNormal.sample(&mut rng);
            data.push(mean + sigma * (a * shared + b * own));
        }
    }
    Tensor::matrix(samples, d, data).expect("shape matches data")
}

/// Pooled SNRs of simulated dot products and the closed-form prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloSnr {
    /// Element-product SNR `Σ s_k² / Σ n_k²`.
    pub products: Snr,
    /// Dot-product SNR `Σ S² / Σ N²` over draws.
    pub dot: Snr,
    pub predicted: f64,
}

impl MonteCarloSnr {
    /// Dot dB minus product dB.
    pub fn gain_db(&self) -> Option<f64> {
        Some(self.dot.db()? - self.products.db()?)
    }
}

/// Simulate `draws` dot products of `d` terms with equi-correlated signal
/// terms and independent noise terms.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_snr(
    d: usize,
    rho_s: f64,
    sigma_s: f64,
    sigma_n: f64,
    mu_s: f64,
    mu_n: f64,
    draws: usize,
    seed: u64,
) -> Result<MonteCarloSnr, AnalysisError> {
    if d == 0 || draws == 0 || !(0.0..=1.0).contains(&rho_s) {
        return Err(AnalysisError::Invalid(format!(
            "need d > 0, draws > 0 and rho in [0, 1], got {d}, {draws}, {rho_s}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (rho_s.sqrt(), (1.0 - rho_s).sqrt());
    let (mut ps, mut pn, mut ds, mut dn) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..draws {
        let shared: f64 = StandardNormal.sample(&mut rng);
        let (mut big_s, mut big_n) = (0.0, 0.0);
        for _ in 0..d {
            let own: f64 = StandardNormal.sample(&mut rng);
            let z: f64 = StandardNormal.sample(&mut rng);
            let s = mu_s + sigma_s * (a * shared + b * own);
            let n = mu_n + sigma_n * z;
            ps += s * s;
            pn += n * n;
            big_s += s;
            big_n += n;
        }
        ds += big_s * big_s;
        dn += big_n * big_n;
    }
    let snr = |s: f64, n: f64| {
        if n == 0.0 {
            Snr::Infinite
        } else {
            Snr::Finite(s / n)
        }
    };
    let df = d as f64;
    Ok(MonteCarloSnr {
        products: snr(ps, pn),
        dot: snr(ds, dn),
        predicted: predict_snr(df, sigma_s, sigma_n, df * mu_s, df * mu_n, rho_s)?,
    })
}
