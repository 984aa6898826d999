use super::AnalysisError;
use crate::tensorcore::{matmul, Tensor};

/// Second-moment sums of a dot product truncated to its first `d` terms,
/// summed over the weight rows of a GEMM. Sums from several GEMMs can be
/// added before taking ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScalingPoint {
    pub d: usize,
    /// `Σ_j mean_i S_ij²` of the exact partial sums.
    pub signal: f64,
    /// `Σ_j mean_i N_ij²` of their quantization error.
    pub noise: f64,
    /// Predicted signal power `Σ_j [Σ_k Var(s_jk) (1 + (d−1)ρ) + μ_Sj²]`.
    pub pred_signal: f64,
    /// Predicted noise power `Σ_j [Σ_k Var(n_jk) + μ_Nj²]`.
    pub pred_noise: f64,
}

impl ScalingPoint {
    pub fn empirical(&self) -> f64 {
        self.signal / self.noise
    }

    pub fn theory(&self) -> f64 {
        self.pred_signal / self.pred_noise
    }

    pub fn add(&mut self, o: &ScalingPoint) {
        self.signal += o.signal;
        self.noise += o.noise;
        self.pred_signal += o.pred_signal;
        self.pred_noise += o.pred_noise;
    }
}

fn prefix(t: &Tensor, k: usize) -> Result<Tensor, AnalysisError> {
    let d = t.cols();
    let data = t.data().chunks(d).flat_map(|r| r[..k].iter().copied());
    Ok(Tensor::matrix(t.rows(), k, data.collect())?)
}

/// Empirical and predicted dot-product SNR of `x (m, k) @ w (n, k)ᵀ`
/// truncated to each length in `widths`, using one correlation `rho_s` for
/// every row. Variances are population variances over the `m` samples.
pub fn gemm_scaling(
    x: &Tensor,
    w: &Tensor,
    x_hat: &Tensor,
    w_hat: &Tensor,
    widths: &[usize],
    rho_s: f64,
) -> Result<Vec<ScalingPoint>, AnalysisError> {
    let (m, n, k) = (x.rows(), w.rows(), x.cols());
    if w.cols() != k || x.shape() != x_hat.shape() || w.shape() != w_hat.shape() {
        return Err(AnalysisError::Shape {
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    if let Some(&d) = widths.iter().find(|&&d| d == 0 || d > k) {
        return Err(AnalysisError::Invalid(format!(
            "width {d} outside [1, {k}]"
        )));
    }
    let mf = m as f64;
    // per-column moments of x, e = x̂ − x
    let mut mx = vec![0.0; k];
    let mut me = vec![0.0; k];
    for i in 0..m {
        for c in 0..k {
            mx[c] += x.get2(i, c) / mf;
            me[c] += (x_hat.get2(i, c) - x.get2(i, c)) / mf;
        }
    }
    let (mut vx, mut ve, mut cex) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    for i in 0..m {
        for c in 0..k {
            let a = x.get2(i, c) - mx[c];
            let e = x_hat.get2(i, c) - x.get2(i, c) - me[c];
            vx[c] += a * a / mf;
            ve[c] += e * e / mf;
            cex[c] += e * a / mf;
        }
    }
    let mut out = Vec::with_capacity(widths.len());
    for &d in widths {
        let y = matmul(&prefix(x, d)?, &prefix(w, d)?.transpose()?)?;
        let y_hat = matmul(&prefix(x_hat, d)?, &prefix(w_hat, d)?.transpose()?)?;
        let mut p = ScalingPoint {
            d,
            ..Default::default()
        };
        for j in 0..n {
            let (wr, ar) = (w.row(j), w_hat.row(j));
            let (mut s2, mut n2, mut ms, mut mn) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..m {
                let s = y.get2(i, j);
                let e = y_hat.get2(i, j) - s;
                s2 += s * s;
                n2 += e * e;
                ms += s;
                mn += e;
            }
            let (ms, mn) = (ms / mf, mn / mf);
            let (mut vs, mut vn) = (0.0, 0.0);
            for c in 0..d {
                let dw = ar[c] - wr[c];
                vs += wr[c] * wr[c] * vx[c];
                vn += ar[c] * ar[c] * ve[c] + 2.0 * ar[c] * dw * cex[c] + dw * dw * vx[c];
            }
            p.signal += s2 / mf;
            p.noise += n2 / mf;
            p.pred_signal += vs * (1.0 + (d as f64 - 1.0) * rho_s) + ms * ms;
            p.pred_noise += vn + mn * mn;
        }
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{equicorrelated_rows, gemm_correlation, quantize_operands};
    use crate::fpquant::QuantConfig;

    #[test]
    fn exact_when_correlation_is_measured_on_the_same_row() {
        // With a single row and the row's own correlation at full width,
        // prediction equals measurement up to the zero-noise-correlation
        // assumption; check the signal side exactly.
        let x = equicorrelated_rows(300, 64, 0.05, 1.0, 0.1, 3);
        let w = Tensor::full(&[1, 64], 0.5);
        let (x_hat, w_hat) = quantize_operands(&x, &w, &QuantConfig::nvfp4()).unwrap();
        let rho = gemm_correlation(&x, &w, &x_hat, &w_hat).unwrap().rho_s;
        let p = gemm_scaling(&x, &w, &x_hat, &w_hat, &[64], rho).unwrap()[0];
        assert!((p.pred_signal / p.signal - 1.0).abs() < 1e-9);
    }

    #[test]
    fn synthetic_equicorrelated_tracks_theory() {
        let x = equicorrelated_rows(4000, 256, 0.01, 1.0, 0.0, 4);
        let w = Tensor::full(&[1, 256], 1.0);
        let (x_hat, w_hat) = quantize_operands(&x, &w, &QuantConfig::nvfp4()).unwrap();
        let pts = gemm_scaling(&x, &w, &x_hat, &w_hat, &[16, 64, 256], 0.01).unwrap();
        for p in pts {
            assert!((p.empirical() / p.theory() - 1.0).abs() < 0.1, "{p:?}");
        }
    }
}
