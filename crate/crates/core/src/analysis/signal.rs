use super::{AnalysisError, Snr};
use crate::fpquant::QuantConfig;
use crate::tensorcore::Tensor;

/// Signal and noise of one dot product, both normalized by the random-walk
/// scale `√D σ_s` of the products `s_k = w_k x_k`. The noise terms are
/// `n_k = ŵ_k x̂_k − s_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalNoiseStats {
    pub d: usize,
    pub s_bar: f64,
    /// Sample standard deviation of `s_k` (divisor `D − 1`).
    pub sigma_s: f64,
    pub n_bar: f64,
    pub sigma_n: f64,
    /// `Σ s_k`.
    pub sum_s: f64,
    /// `Σ n_k`.
    pub sum_n: f64,
    pub z_s: f64,
    pub z_n: f64,
}

impl SignalNoiseStats {
    /// `(z_s / z_n)²`, which equals the SNR of the scalar dot product.
    pub fn snr(&self) -> Snr {
        if self.z_n == 0.0 {
            Snr::Infinite
        } else {
            Snr::Finite((self.z_s / self.z_n).powi(2))
        }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Decompose `Σ w_k x_k` given the quantized operands.
pub fn signal_noise_quantized(
    w: &[f64],
    x: &[f64],
    w_hat: &[f64],
    x_hat: &[f64],
) -> Result<SignalNoiseStats, AnalysisError> {
    let d = w.len();
    if x.len() != d || w_hat.len() != d || x_hat.len() != d {
        return Err(AnalysisError::Shape {
            left: vec![w.len(), w_hat.len()],
            right: vec![x.len(), x_hat.len()],
        });
    }
    if d < 2 {
        return Err(AnalysisError::TooFew {
            what: "terms",
            need: 2,
            got: d,
        });
    }
    let s: Vec<f64> = w.iter().zip(x).map(|(a, b)| a * b).collect();
    let n: Vec<f64> = (0..d).map(|k| w_hat[k] * x_hat[k] - s[k]).collect();
    let (s_bar, sigma_s) = mean_std(&s);
    if sigma_s == 0.0 {
        return Err(AnalysisError::ConstantProducts);
    }
    let (n_bar, sigma_n) = mean_std(&n);
    let sum_s: f64 = s.iter().sum();
    let sum_n: f64 = n.iter().sum();
    let scale = (d as f64).sqrt() * sigma_s;
    Ok(SignalNoiseStats {
        d,
        s_bar,
        sigma_s,
        n_bar,
        sigma_n,
        sum_s,
        sum_n,
        z_s: sum_s.abs() / scale,
        z_n: sum_n.abs() / scale,
    })
}

/// Quantize `w` and `x` as single blocked rows under `cfg` and decompose
/// their dot product.
pub fn signal_noise(
    w: &[f64],
    x: &[f64],
    cfg: &QuantConfig,
) -> Result<SignalNoiseStats, AnalysisError> {
    let wt = Tensor::matrix(1, w.len(), w.to_vec())?;
    let xt = Tensor::matrix(1, x.len(), x.to_vec())?;
    let (x_hat, w_hat) = super::quantize_operands(&xt, &wt, cfg)?;
    signal_noise_quantized(w, x, w_hat.data(), x_hat.data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_noise_is_infinite() {
        let w = [1.0, 2.0, -1.0];
        let x = [0.5, 0.25, 1.0];
        let st = signal_noise_quantized(&w, &x, &w, &x).unwrap();
        assert_eq!(st.z_n, 0.0);
        assert_eq!(st.snr(), Snr::Infinite);
    }

    #[test]
    fn constant_products_rejected() {
        let one = [1.0; 4];
        assert_eq!(
            signal_noise_quantized(&one, &one, &one, &one),
            Err(AnalysisError::ConstantProducts)
        );
        assert!(matches!(
            signal_noise_quantized(&[1.0], &[1.0], &[1.0], &[1.0]),
            Err(AnalysisError::TooFew { .. })
        ));
    }

    #[test]
    fn matches_scratch_derivation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cfg = QuantConfig::nvfp4();
        let st = signal_noise(&w, &x, &cfg).unwrap();

        let (x_hat, w_hat) = super::super::quantize_operands(
            &Tensor::matrix(1, 16, x.clone()).unwrap(),
            &Tensor::matrix(1, 16, w.clone()).unwrap(),
            &cfg,
        )
        .unwrap();
        let mut ss = 0.0;
        let mut nn = 0.0;
        let mut s = [0.0; 16];
        for k in 0..16 {
            s[k] = w[k] * x[k];
            ss += s[k];
            nn += w_hat.data()[k] * x_hat.data()[k] - s[k];
        }
        let mean = ss / 16.0;
        let var: f64 = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 15.0;
        let z_s = ss.abs() / (4.0 * var.sqrt());
        let z_n = nn.abs() / (4.0 * var.sqrt());
        assert!((st.s_bar - mean).abs() < 1e-12);
        assert!((st.sigma_s - var.sqrt()).abs() < 1e-12);
        assert!((st.z_s - z_s).abs() < 1e-12 * z_s.max(1.0));
        assert!((st.z_n - z_n).abs() < 1e-12 * z_n.max(1.0));

        let dot_hat = ss + nn;
        let direct = ss * ss / ((dot_hat - ss) * (dot_hat - ss));
        assert!((st.snr().ratio() / direct - 1.0).abs() < 1e-10);
    }
}
