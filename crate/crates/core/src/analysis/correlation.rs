use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::AnalysisError;
use crate::tensorcore::{matmul, Tensor};

/// Effective pairwise correlation of the columns of a `(samples, D)` matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub rho: f64,
    /// Columns that entered the estimate.
    pub terms: usize,
    /// Constant columns that were excluded.
    pub dropped: usize,
    pub samples: usize,
}

/// `(Var(Σ_k u_k) / Σ_k Var(u_k) − 1) / (D − 1)`, variances taken over the
/// rows of `u`. Exactly constant columns are excluded.
pub fn effective_correlation(u: &Tensor) -> Result<Correlation, AnalysisError> {
    if u.shape().len() != 2 {
        return Err(AnalysisError::Invalid(format!(
            "expected a (samples, terms) matrix, got shape {:?}",
            u.shape()
        )));
    }
    weighted(u, u.cols(), None)
}

/// Sample weights are bootstrap multiplicities summing to the row count.
fn weighted(u: &Tensor, cols: usize, counts: Option<&[f64]>) -> Result<Correlation, AnalysisError> {
    let (m, d) = (u.rows(), u.cols());
    if m < 2 {
        return Err(AnalysisError::TooFew {
            what: "samples",
            need: 2,
            got: m,
        });
    }
    let keep: Vec<usize> = (0..cols)
        .filter(|&k| {
            let first = u.data()[k];
            (1..m).any(|i| u.data()[i * d + k] != first)
        })
        .collect();
    if keep.len() < 2 {
        return Err(AnalysisError::TooFew {
            what: "non-constant terms",
            need: 2,
            got: keep.len(),
        });
    }
    let sums: Vec<f64> = (0..m)
        .map(|i| keep.iter().map(|&k| u.data()[i * d + k]).sum())
        .collect();
    let col = |k: usize| (0..m).map(move |i| u.data()[i * d + k]);
    let total: f64 = keep.iter().map(|&k| wvar(col(k), counts)).sum();
    let var_sum = wvar(sums.iter().copied(), counts);
    Ok(Correlation {
        rho: (var_sum / total - 1.0) / (keep.len() - 1) as f64,
        terms: keep.len(),
        dropped: cols - keep.len(),
        samples: m,
    })
}

/// Unbiased variance, optionally with integer sample multiplicities.
fn wvar(v: impl Iterator<Item = f64> + Clone, counts: Option<&[f64]>) -> f64 {
    match counts {
        None => {
            let (mut n, mut s) = (0.0, 0.0);
            for a in v.clone() {
                n += 1.0;
                s += a;
            }
            let mean = s / n;
            v.map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)
        }
        Some(c) => {
            let n: f64 = c.iter().sum();
            let mean = v.clone().zip(c).map(|(a, w)| a * w).sum::<f64>() / n;
            v.zip(c)
                .map(|(a, w)| w * (a - mean) * (a - mean))
                .sum::<f64>()
                / (n - 1.0)
        }
    }
}

fn bootstrap_counts(m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut c = vec![0.0; m];
    for _ in 0..m {
        c[rng.random_range(0..m)] += 1.0;
    }
    c
}

/// Percentile bootstrap interval of the mean of `values`.
pub fn bootstrap_ci(values: &[f64], level: f64, reps: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..reps)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let lo = ((1.0 - level) / 2.0 * reps as f64).floor() as usize;
    let hi = (((1.0 + level) / 2.0 * reps as f64).ceil() as usize).min(reps) - 1;
    (means[lo], means[hi])
}

/// Signal and noise correlations of a GEMM `x (m, k) @ w (n, k)ᵀ`. Each
/// weight row defines one dot product whose terms `w_jk x_ik` vary over the
/// `m` token samples.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationStats {
    /// Mean over rows of the per-row signal correlation.
    pub rho_s: f64,
    pub rho_n: f64,
    pub rows_s: Vec<f64>,
    pub rows_n: Vec<f64>,
}

struct ColumnStats {
    var_x: Vec<f64>,
    var_e: Vec<f64>,
    cov_ex: Vec<f64>,
}

fn column_stats(x: &Tensor, x_hat: &Tensor) -> ColumnStats {
    let (m, k) = (x.rows(), x.cols());
    let mut mx = vec![0.0; k];
    let mut me = vec![0.0; k];
    for i in 0..m {
        for c in 0..k {
            let a = x.data()[i * k + c];
            mx[c] += a;
            me[c] += x_hat.data()[i * k + c] - a;
        }
    }
    mx.iter_mut()
        .chain(me.iter_mut())
        .for_each(|v| *v /= m as f64);
    let mut st = ColumnStats {
        var_x: vec![0.0; k],
        var_e: vec![0.0; k],
        cov_ex: vec![0.0; k],
    };
    for i in 0..m {
        for c in 0..k {
            let a = x.data()[i * k + c] - mx[c];
            let e = x_hat.data()[i * k + c] - x.data()[i * k + c] - me[c];
            st.var_x[c] += a * a;
            st.var_e[c] += e * e;
            st.cov_ex[c] += e * a;
        }
    }
    let dn = (m - 1) as f64;
    for v in [&mut st.var_x, &mut st.var_e, &mut st.cov_ex] {
        v.iter_mut().for_each(|a| *a /= dn);
    }
    st
}

fn column_var(col: impl Iterator<Item = f64> + Clone) -> f64 {
    wvar(col, None)
}

fn gemm_shapes(
    x: &Tensor,
    w: &Tensor,
    x_hat: &Tensor,
    w_hat: &Tensor,
) -> Result<(usize, usize, usize), AnalysisError> {
    if x.shape().len() != 2
        || w.shape().len() != 2
        || x.cols() != w.cols()
        || x.shape() != x_hat.shape()
        || w.shape() != w_hat.shape()
    {
        return Err(AnalysisError::Shape {
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    if x.rows() < 2 {
        return Err(AnalysisError::TooFew {
            what: "samples",
            need: 2,
            got: x.rows(),
        });
    }
    Ok((x.rows(), w.rows(), x.cols()))
}

fn row_rho(var_sum: f64, term_vars: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut total, mut terms) = (0.0, 0usize);
    for v in term_vars {
        if v > 0.0 {
            total += v;
            terms += 1;
        }
    }
    (terms >= 2 && total > 0.0).then(|| (var_sum / total - 1.0) / (terms - 1) as f64)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-row signal and noise correlations, computed from the GEMM outputs
/// and per-column moments instead of materializing every product.
pub fn gemm_correlation(
    x: &Tensor,
    w: &Tensor,
    x_hat: &Tensor,
    w_hat: &Tensor,
) -> Result<CorrelationStats, AnalysisError> {
    let (m, n, k) = gemm_shapes(x, w, x_hat, w_hat)?;
    let y = matmul(x, &w.transpose()?)?;
    let y_hat = matmul(x_hat, &w_hat.transpose()?)?;
    let st = column_stats(x, x_hat);
    let mut rows_s = Vec::with_capacity(n);
    let mut rows_n = Vec::with_capacity(n);
    for j in 0..n {
        let wr = w.row(j);
        let ar = w_hat.row(j);
        let vs = column_var((0..m).map(|i| y.get2(i, j)));
        if let Some(r) = row_rho(vs, (0..k).map(|c| wr[c] * wr[c] * st.var_x[c])) {
            rows_s.push(r);
        }
        let vn = column_var((0..m).map(|i| y_hat.get2(i, j) - y.get2(i, j)));
        let terms = (0..k).map(|c| {
            let d = ar[c] - wr[c];
            ar[c] * ar[c] * st.var_e[c] + 2.0 * ar[c] * d * st.cov_ex[c] + d * d * st.var_x[c]
        });
        if let Some(r) = row_rho(vn, terms) {
            rows_n.push(r);
        }
    }
    if rows_s.is_empty() {
        return Err(AnalysisError::TooFew {
            what: "rows with varying products",
            need: 1,
            got: 0,
        });
    }
    Ok(CorrelationStats {
        rho_s: mean(&rows_s),
        rho_n: if rows_n.is_empty() {
            0.0
        } else {
            mean(&rows_n)
        },
        rows_s,
        rows_n,
    })
}

/// Effective correlation restricted to the first `k` terms, for each `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialCurve {
    pub k: Vec<usize>,
    pub rho: Vec<f64>,
    /// Bootstrap standard error of each point (empty without bootstrap).
    pub se: Vec<f64>,
    /// Bootstrap standard error of each point's deviation from the median.
    pub dev_se: Vec<f64>,
    pub median: f64,
    pub max_deviation: f64,
    /// Bootstrap replicates of `rho`.
    pub reps: Vec<Vec<f64>>,
}

impl PartialCurve {
    fn new(k: Vec<usize>, rho: Vec<f64>, reps: &[Vec<f64>]) -> Self {
        let med = median(&rho);
        let max_deviation = rho.iter().map(|r| (r - med).abs()).fold(0.0, f64::max);
        let (se, dev_se) = if reps.len() < 2 {
            (Vec::new(), Vec::new())
        } else {
            let devs: Vec<Vec<f64>> = reps
                .iter()
                .map(|r| {
                    let m = median(r);
                    r.iter().map(|v| v - m).collect()
                })
                .collect();
            let sd = |all: &[Vec<f64>], i: usize| column_var(all.iter().map(|r| r[i])).sqrt();
            (
                (0..rho.len()).map(|i| sd(reps, i)).collect(),
                (0..rho.len()).map(|i| sd(&devs, i)).collect(),
            )
        };
        Self {
            k,
            rho,
            se,
            dev_se,
            median: med,
            max_deviation,
            reps: reps.to_vec(),
        }
    }

    /// Pointwise mean of curves on one grid. Replicates are averaged index
    /// by index, so the curves must come from the same bootstrap draws
    /// (same seed and sample count) for the error bars to be meaningful.
    pub fn average(curves: &[PartialCurve]) -> Result<Self, AnalysisError> {
        let first = curves.first().ok_or(AnalysisError::TooFew {
            what: "curves",
            need: 1,
            got: 0,
        })?;
        if curves
            .iter()
            .any(|c| c.k != first.k || c.reps.len() != first.reps.len())
        {
            return Err(AnalysisError::Invalid(
                "curves differ in grid or replicate count".into(),
            ));
        }
        let n = curves.len() as f64;
        let avg = |pick: &dyn Fn(&PartialCurve) -> &[f64]| -> Vec<f64> {
            (0..first.k.len())
                .map(|i| curves.iter().map(|c| pick(c)[i]).sum::<f64>() / n)
                .collect()
        };
        let rho = avg(&|c| &c.rho);
        let reps: Vec<Vec<f64>> = (0..first.reps.len())
            .map(|r| avg(&|c| &c.reps[r]))
            .collect();
        Ok(Self::new(first.k.clone(), rho, &reps))
    }

    /// Every point lies within `z` bootstrap standard errors of the median.
    /// `None` without bootstrap replicates.
    pub fn is_flat(&self, z: f64) -> Option<bool> {
        if self.dev_se.is_empty() {
            return None;
        }
        Some(
            self.rho
                .iter()
                .zip(&self.dev_se)
                .all(|(r, s)| (r - self.median).abs() <= z * s),
        )
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn check_grid(k_grid: &[usize], d: usize) -> Result<(), AnalysisError> {
    if k_grid.is_empty() {
        return Err(AnalysisError::Invalid("empty k grid".into()));
    }
    if let Some(&k) = k_grid.iter().find(|&&k| k < 2 || k > d) {
        return Err(AnalysisError::Invalid(format!(
            "partial length {k} outside [2, {d}]"
        )));
    }
    Ok(())
}

/// [`effective_correlation`] of the first `k` columns of `u` for each `k`
/// in `k_grid`, with `bootstrap` resamples of the rows for error bars.
pub fn partial_sum_correlation(
    u: &Tensor,
    k_grid: &[usize],
    bootstrap: usize,
    seed: u64,
) -> Result<PartialCurve, AnalysisError> {
    check_grid(k_grid, u.cols())?;
    let curve = |counts: Option<&[f64]>| -> Result<Vec<f64>, AnalysisError> {
        k_grid
            .iter()
            .map(|&k| weighted(u, k, counts).map(|c| c.rho))
            .collect()
    };
    let rho = curve(None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reps = (0..bootstrap)
        .map(|_| curve(Some(&bootstrap_counts(u.rows(), &mut rng))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PartialCurve::new(k_grid.to_vec(), rho, &reps))
}

/// Signal partial-sum curve of a GEMM: per weight row, the correlation of
/// the first `k` products `w_jk x_ik`, averaged over rows. Bootstrap
/// resamples token rows.
pub fn gemm_partial_curve(
    x: &Tensor,
    w: &Tensor,
    k_grid: &[usize],
    bootstrap: usize,
    seed: u64,
) -> Result<PartialCurve, AnalysisError> {
    let (m, n, d) = gemm_shapes(x, w, x, w)?;
    check_grid(k_grid, d)?;
    let prefix = |t: &Tensor, k: usize| -> Result<Tensor, AnalysisError> {
        let data = t.data().chunks(d).flat_map(|r| r[..k].iter().copied());
        Ok(Tensor::matrix(t.rows(), k, data.collect())?)
    };
    let mut partials = Vec::with_capacity(k_grid.len());
    for &k in k_grid {
        let p = matmul(&prefix(x, k)?, &prefix(w, k)?.transpose()?)?;
        partials.push(p);
    }
    let w2: Vec<f64> = w.data().iter().map(|a| a * a).collect();
    let curve = |counts: Option<&[f64]>| -> Vec<f64> {
        let var_x: Vec<f64> = (0..d)
            .map(|c| wvar((0..m).map(|i| x.data()[i * d + c]), counts))
            .collect();
        k_grid
            .iter()
            .zip(&partials)
            .map(|(&k, p)| {
                let rows: Vec<f64> = (0..n)
                    .filter_map(|j| {
                        let vs = wvar((0..m).map(|i| p.get2(i, j)), counts);
                        let wr = &w2[j * d..j * d + k];
                        row_rho(vs, wr.iter().zip(&var_x).map(|(a, b)| a * b))
                    })
                    .collect();
                if rows.is_empty() {
                    f64::NAN
                } else {
                    mean(&rows)
                }
            })
            .collect()
    };
    let rho = curve(None);
    if rho.iter().any(|r| r.is_nan()) {
        return Err(AnalysisError::TooFew {
            what: "rows with varying products",
            need: 1,
            got: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reps: Vec<Vec<f64>> = (0..bootstrap)
        .map(|_| curve(Some(&bootstrap_counts(m, &mut rng))))
        .collect();
    Ok(PartialCurve::new(k_grid.to_vec(), rho, &reps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{equicorrelated_rows, quantize_operands};
    use crate::fpquant::QuantConfig;

    /// `2 Σ_{j<k} Cov(j, k) / ((D − 1) Σ_k Var(k))` by explicit pairs.
    fn pairwise_oracle(u: &Tensor) -> f64 {
        let (m, d) = (u.rows(), u.cols());
        let col = |k: usize| -> Vec<f64> { (0..m).map(|i| u.get2(i, k)).collect() };
        let cov = |a: &[f64], b: &[f64]| {
            let ma = a.iter().sum::<f64>() / m as f64;
            let mb = b.iter().sum::<f64>() / m as f64;
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - ma) * (y - mb))
                .sum::<f64>()
                / (m - 1) as f64
        };
        let cols: Vec<Vec<f64>> = (0..d).map(col).collect();
        let mut pairs = 0.0;
        for j in 0..d {
            for k in j + 1..d {
                pairs += cov(&cols[j], &cols[k]);
            }
        }
        let vars: f64 = cols.iter().map(|c| cov(c, c)).sum();
        2.0 * pairs / ((d - 1) as f64 * vars)
    }

    fn rand_matrix(m: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::randn(&[m, d], 1.0, &mut rng);
        // give columns unequal scales and a shared component
        let shared: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        for i in 0..m {
            for k in 0..d {
                let v = &mut t.data_mut()[i * d + k];
                *v = (*v + 0.5 * shared[i]) * (1.0 + k as f64 * 0.3);
            }
        }
        t
    }

    #[test]
    fn identical_and_opposite_columns() {
        let same = Tensor::matrix(2, 2, vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        assert!((effective_correlation(&same).unwrap().rho - 1.0).abs() < 1e-15);
        let opp = Tensor::matrix(2, 2, vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        assert!((effective_correlation(&opp).unwrap().rho + 1.0).abs() < 1e-15);
    }

    #[test]
    fn matches_pairwise_oracle() {
        let u = rand_matrix(200, 8, 5);
        let r = effective_correlation(&u).unwrap();
        assert!((r.rho - pairwise_oracle(&u)).abs() < 1e-8);
        assert_eq!((r.terms, r.dropped), (8, 0));
    }

    #[test]
    fn constant_columns_dropped() {
        let mut u = rand_matrix(50, 6, 6);
        for i in 0..50 {
            u.data_mut()[i * 6 + 2] = 0.1;
        }
        let r = effective_correlation(&u).unwrap();
        assert_eq!((r.terms, r.dropped), (5, 1));
        let kept: Vec<f64> = (0..50)
            .flat_map(|i| {
                let row = u.row(i).to_vec();
                [row[0], row[1], row[3], row[4], row[5]]
            })
            .collect();
        let kept = Tensor::matrix(50, 5, kept).unwrap();
        assert!((r.rho - pairwise_oracle(&kept)).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples_rejected() {
        let u = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            effective_correlation(&u),
            Err(AnalysisError::TooFew {
                what: "samples",
                ..
            })
        ));
    }

    #[test]
    fn gemm_rows_match_materialized_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_matrix(64, 32, 8);
        let w = Tensor::randn(&[5, 32], 0.1, &mut rng);
        let (x_hat, w_hat) = quantize_operands(&x, &w, &QuantConfig::nvfp4()).unwrap();
        let st = gemm_correlation(&x, &w, &x_hat, &w_hat).unwrap();
        for j in 0..5 {
            let mut s = Vec::new();
            let mut nz = Vec::new();
            for i in 0..64 {
                for k in 0..32 {
                    let p = w.get2(j, k) * x.get2(i, k);
                    s.push(p);
                    nz.push(w_hat.get2(j, k) * x_hat.get2(i, k) - p);
                }
            }
            let s = effective_correlation(&Tensor::matrix(64, 32, s).unwrap()).unwrap();
            let nz = effective_correlation(&Tensor::matrix(64, 32, nz).unwrap()).unwrap();
            assert!((st.rows_s[j] - s.rho).abs() < 1e-8, "{j}");
            assert!((st.rows_n[j] - nz.rho).abs() < 1e-8, "{j}");
        }
    }

    #[test]
    fn gemm_curve_matches_generic_curve() {
        let x = rand_matrix(40, 16, 9);
        let w = Tensor::matrix(1, 16, (0..16).map(|k| 0.2 + 0.05 * k as f64).collect()).unwrap();
        let grid = [4, 8, 16];
        let a = gemm_partial_curve(&x, &w, &grid, 0, 0).unwrap();
        let u: Vec<f64> = (0..40)
            .flat_map(|i| (0..16).map(move |k| (i, k)))
            .map(|(i, k)| x.get2(i, k) * w.get2(0, k))
            .collect();
        let b = partial_sum_correlation(&Tensor::matrix(40, 16, u).unwrap(), &grid, 0, 0).unwrap();
        for (p, q) in a.rho.iter().zip(&b.rho) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn partial_curves_for_reference_inputs() {
        let iid = equicorrelated_rows(2000, 64, 0.0, 1.0, 0.0, 11);
        let c = partial_sum_correlation(&iid, &[16, 32, 64], 0, 0).unwrap();
        let bound = 3.0 / (2000f64).sqrt();
        assert!(c.rho.iter().all(|r| r.abs() < bound), "{:?}", c.rho);

        let perfect = Tensor::matrix(
            3,
            8,
            [1.0, -2.0, 0.5].iter().flat_map(|&v| [v; 8]).collect(),
        )
        .unwrap();
        let c = partial_sum_correlation(&perfect, &[2, 4, 8], 0, 0).unwrap();
        assert!(c.rho.iter().all(|r| (r - 1.0).abs() < 1e-12));

        let eq = equicorrelated_rows(4000, 256, 0.003, 1.0, 0.0, 12);
        let c = partial_sum_correlation(&eq, &[16, 32, 64, 128, 256], 40, 1).unwrap();
        assert_eq!(c.is_flat(3.0), Some(true), "{c:?}");
        assert!(partial_sum_correlation(&eq, &[1], 0, 0).is_err());
        assert!(partial_sum_correlation(&eq, &[512], 0, 0).is_err());
    }

    #[test]
    fn averaged_curve_matches_pointwise_mean() {
        let a = equicorrelated_rows(500, 64, 0.01, 1.0, 0.0, 3);
        let b = equicorrelated_rows(500, 64, 0.05, 1.0, 0.0, 4);
        let grid = [16, 32, 64];
        let ca = partial_sum_correlation(&a, &grid, 20, 9).unwrap();
        let cb = partial_sum_correlation(&b, &grid, 20, 9).unwrap();
        let m = PartialCurve::average(&[ca.clone(), cb.clone()]).unwrap();
        for i in 0..3 {
            assert!((m.rho[i] - 0.5 * (ca.rho[i] + cb.rho[i])).abs() < 1e-15);
            assert!((m.reps[7][i] - 0.5 * (ca.reps[7][i] + cb.reps[7][i])).abs() < 1e-15);
        }
        assert_eq!(PartialCurve::average(&[ca.clone()]).unwrap(), ca);
        let other = partial_sum_correlation(&b, &[16, 64], 20, 9).unwrap();
        assert!(PartialCurve::average(&[ca, other]).is_err());
        assert!(PartialCurve::average(&[]).is_err());
    }

    #[test]
    fn bootstrap_interval_brackets_mean() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        let (lo, hi) = bootstrap_ci(&v, 0.95, 2000, 3);
        assert!(lo < 3.0 && 3.0 < hi && lo >= 1.0 && hi <= 5.0);
    }
}
