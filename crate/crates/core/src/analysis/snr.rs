use std::fmt;

use serde::{Deserialize, Serialize};

use super::{AnalysisError, Snr};
use crate::fpquant::{fake_quant, QuantConfig};
use crate::tensorcore::{matmul, Tensor};

/// `‖t‖² / ‖t − t̂‖²`.
pub fn snr(t: &Tensor, t_hat: &Tensor) -> Result<Snr, AnalysisError> {
    if t.shape() != t_hat.shape() {
        return Err(AnalysisError::Shape {
            left: t.shape().to_vec(),
            right: t_hat.shape().to_vec(),
        });
    }
    ratio(
        t.sum_sq(),
        t.data()
            .iter()
            .zip(t_hat.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum(),
    )
}

fn ratio(signal: f64, noise: f64) -> Result<Snr, AnalysisError> {
    if signal == 0.0 {
        return Err(AnalysisError::ZeroSignal);
    }
    Ok(if noise == 0.0 {
        Snr::Infinite
    } else {
        Snr::Finite(signal / noise)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Weights,
    Activations,
    Products,
    Dot,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::Weights,
        Stage::Activations,
        Stage::Products,
        Stage::Dot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Weights => "weights",
            Stage::Activations => "activations",
            Stage::Products => "products",
            Stage::Dot => "dot",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSnr {
    pub weights: Snr,
    pub activations: Snr,
    pub products: Snr,
    pub dot: Snr,
}

impl StageSnr {
    pub fn get(&self, stage: Stage) -> Snr {
        match stage {
            Stage::Weights => self.weights,
            Stage::Activations => self.activations,
            Stage::Products => self.products,
            Stage::Dot => self.dot,
        }
    }

    /// Dot-product dB minus product dB; `None` if either is infinite.
    pub fn gain_db(&self) -> Option<f64> {
        Some(self.dot.db()? - self.products.db()?)
    }

    fn mean(all: &[StageSnr]) -> Option<StageSnr> {
        let pick = |s: Stage| Snr::mean_db(&all.iter().map(|x| x.get(s)).collect::<Vec<_>>());
        Some(StageSnr {
            weights: pick(Stage::Weights)?,
            activations: pick(Stage::Activations)?,
            products: pick(Stage::Products)?,
            dot: pick(Stage::Dot)?,
        })
    }
}

/// Stage SNRs of one GEMM, pooled over all of its elements.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSnr {
    pub layer: usize,
    pub gemm: String,
    pub stages: StageSnr,
    /// Alternative pooling: dot SNR per output row (pooled over tokens),
    /// averaged in dB. `None` if any row is noise-free.
    pub dot_row_mean_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnrReport {
    /// Per-stage SNR averaged in dB over `layers`.
    pub stages: StageSnr,
    pub layers: Vec<LayerSnr>,
    /// `None` when a stage SNR is infinite.
    pub averaging_gain_db: Option<f64>,
}

impl SnrReport {
    pub fn from_layers(layers: Vec<LayerSnr>) -> Result<Self, AnalysisError> {
        let all: Vec<StageSnr> = layers.iter().map(|l| l.stages).collect();
        let stages = StageSnr::mean(&all).ok_or(AnalysisError::TooFew {
            what: "layers",
            need: 1,
            got: 0,
        })?;
        Ok(Self {
            stages,
            averaging_gain_db: stages.gain_db(),
            layers,
        })
    }

    /// Stage SNRs averaged in dB over the GEMMs of each block, in block order.
    pub fn per_block(&self) -> Vec<(usize, StageSnr)> {
        let mut blocks: Vec<usize> = self.layers.iter().map(|l| l.layer).collect();
        blocks.dedup();
        blocks
            .into_iter()
            .filter_map(|b| {
                let all: Vec<StageSnr> = self
                    .layers
                    .iter()
                    .filter(|l| l.layer == b)
                    .map(|l| l.stages)
                    .collect();
                StageSnr::mean(&all).map(|s| (b, s))
            })
            .collect()
    }
}

/// Quantized operands of `x (m, k) @ w (n, k)ᵀ`, both blocked along `k`.
/// The weight uses a seed distinct from the activation, as in the model
/// forward pass.
pub fn quantize_operands(
    x: &Tensor,
    w: &Tensor,
    cfg: &QuantConfig,
) -> Result<(Tensor, Tensor), AnalysisError> {
    let x_hat = fake_quant(x, cfg)?;
    let w_hat = fake_quant(w, &cfg.clone().with_seed(cfg.seed ^ 0x57))?;
    Ok((x_hat, w_hat))
}

fn check_gemm(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize), AnalysisError> {
    if x.shape().len() != 2 || w.shape().len() != 2 || x.cols() != w.cols() {
        return Err(AnalysisError::Shape {
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    Ok((x.rows(), w.rows(), x.cols()))
}

/// Column sums `Σ_i f(a_ik, b_ik)` of two `(r, k)` matrices.
fn col_sums(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let k = a.cols();
    let mut out = vec![0.0; k];
    for (ra, rb) in a.data().chunks(k).zip(b.data().chunks(k)) {
        for ((o, &p), &q) in out.iter_mut().zip(ra).zip(rb) {
            *o += f(p, q);
        }
    }
    out
}

/// Pooled SNR of the element products `w_jk x_ik` over all `(i, j, k)`,
/// without materializing the `m·n·k` products. With `e = x̂ − x` and
/// `d = ŵ − w` the product error is `ŵe + dx`, so every sum factorizes
/// over `k`.
fn product_snr(
    x: &Tensor,
    w: &Tensor,
    x_hat: &Tensor,
    w_hat: &Tensor,
) -> Result<Snr, AnalysisError> {
    let xx = col_sums(x, x, |a, _| a * a);
    let ww = col_sums(w, w, |a, _| a * a);
    let ee = col_sums(x_hat, x, |h, a| (h - a) * (h - a));
    let ex = col_sums(x_hat, x, |h, a| (h - a) * a);
    let aa = col_sums(w_hat, w, |h, _| h * h);
    let dd = col_sums(w_hat, w, |h, a| (h - a) * (h - a));
    let ad = col_sums(w_hat, w, |h, a| h * (h - a));
    let signal: f64 = xx.iter().zip(&ww).map(|(a, b)| a * b).sum();
    let noise: f64 = (0..xx.len())
        .map(|k| aa[k] * ee[k] + 2.0 * ad[k] * ex[k] + dd[k] * xx[k])
        .sum();
    ratio(signal, noise.max(0.0))
}

/// Stage SNRs for a GEMM whose quantized operands are already known.
pub(crate) fn measure(
    layer: usize,
    gemm: &str,
    x: &Tensor,
    w: &Tensor,
    x_hat: &Tensor,
    w_hat: &Tensor,
) -> Result<LayerSnr, AnalysisError> {
    let (m, n, _) = check_gemm(x, w)?;
    if x.shape() != x_hat.shape() || w.shape() != w_hat.shape() {
        return Err(AnalysisError::Shape {
            left: x_hat.shape().to_vec(),
            right: w_hat.shape().to_vec(),
        });
    }
    let y = matmul(x, &w.transpose()?)?;
    let y_hat = matmul(x_hat, &w_hat.transpose()?)?;
    let mut rows = Vec::with_capacity(n);
    for j in 0..n {
        let (mut s, mut e) = (0.0, 0.0);
        for i in 0..m {
            let (a, b) = (y.get2(i, j), y_hat.get2(i, j));
            s += a * a;
            e += (a - b) * (a - b);
        }
        if s > 0.0 {
            rows.push(ratio(s, e)?);
        }
    }
    let dot_row_mean_db = Snr::mean_db(&rows).and_then(Snr::db);
    Ok(LayerSnr {
        layer,
        gemm: gemm.to_string(),
        stages: StageSnr {
            weights: snr(w, w_hat)?,
            activations: snr(x, x_hat)?,
            products: product_snr(x, w, x_hat, w_hat)?,
            dot: snr(&y, &y_hat)?,
        },
        dot_row_mean_db,
    })
}

/// SNR at each stage of `x (m, k) @ w (n, k)ᵀ` under `cfg`; `None` leaves
/// the operands exact and every stage infinite.
pub fn stage_snr(
    w: &Tensor,
    x: &Tensor,
    cfg: Option<&QuantConfig>,
) -> Result<SnrReport, AnalysisError> {
    check_gemm(x, w)?;
    let (x_hat, w_hat) = match cfg {
        Some(c) => quantize_operands(x, w, c)?,
        None => (x.clone(), w.clone()),
    };
    SnrReport::from_layers(vec![measure(0, "gemm", x, w, &x_hat, &w_hat)?])
}

/// Dot-product dB minus element-product dB.
pub fn averaging_gain(report: &SnrReport) -> Result<f64, AnalysisError> {
    let p = report
        .stages
        .products
        .db()
        .ok_or(AnalysisError::InfiniteStage(Stage::Products))?;
    let d = report
        .stages
        .dot
        .db()
        .ok_or(AnalysisError::InfiniteStage(Stage::Dot))?;
    Ok(d - p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trivial_cases() {
        let t = Tensor::from_vec(vec![1.0, 0.0]);
        assert_eq!(snr(&t, &t).unwrap(), Snr::Infinite);
        let z = Tensor::from_vec(vec![0.0, 0.0]);
        assert_eq!(snr(&t, &z).unwrap(), Snr::Finite(1.0));
        assert_eq!(Snr::Finite(1.0).db(), Some(0.0));
        assert_eq!(snr(&z, &t), Err(AnalysisError::ZeroSignal));
        assert!(matches!(
            snr(&t, &Tensor::zeros(&[3])),
            Err(AnalysisError::Shape { .. })
        ));
    }

    #[test]
    fn matches_two_pass_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[7, 13], 1.0, &mut rng);
        let b = Tensor::randn(&[7, 13], 0.3, &mut rng);
        let noisy = Tensor::new(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
        )
        .unwrap();
        let num = a.norm().powi(2);
        let den = b.norm().powi(2);
        let got = snr(&a, &noisy).unwrap().ratio();
        assert!((got / (num / den) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unquantized_stages_are_infinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::randn(&[8, 32], 1.0, &mut rng);
        let x = Tensor::randn(&[4, 32], 1.0, &mut rng);
        let r = stage_snr(&w, &x, None).unwrap();
        for s in Stage::ALL {
            assert_eq!(r.stages.get(s), Snr::Infinite);
        }
        assert_eq!(r.averaging_gain_db, None);
        assert_eq!(
            averaging_gain(&r),
            Err(AnalysisError::InfiniteStage(Stage::Products))
        );
    }

    #[test]
    fn single_term_has_zero_gain() {
        // 2.4 in a block whose scale is 1 rounds to 2.0
        let w = Tensor::matrix(1, 1, vec![2.4]).unwrap();
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let w_hat = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let l = measure(0, "g", &x, &w, &x, &w_hat).unwrap();
        assert!((l.stages.products.ratio() / l.stages.dot.ratio() - 1.0).abs() < 1e-12);
        assert!((l.stages.dot.ratio() - 36.0).abs() < 1e-9);
        let r = SnrReport::from_layers(vec![l]).unwrap();
        assert!(averaging_gain(&r).unwrap().abs() < 1e-10);
    }

    #[test]
    fn matches_explicit_materialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::randn(&[32, 128], 0.05, &mut rng);
        let x = Tensor::randn(&[32, 128], 1.0, &mut rng);
        let cfg = QuantConfig::nvfp4().with_seed(9);
        let r = stage_snr(&w, &x, Some(&cfg)).unwrap();

        let (x_hat, w_hat) = quantize_operands(&x, &w, &cfg).unwrap();
        let (mut ps, mut pn, mut ds, mut dn) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..32 {
            for j in 0..32 {
                let (mut dot, mut dot_hat) = (0.0, 0.0);
                for k in 0..128 {
                    let p = w.get2(j, k) * x.get2(i, k);
                    let q = w_hat.get2(j, k) * x_hat.get2(i, k);
                    ps += p * p;
                    pn += (q - p) * (q - p);
                    dot += p;
                    dot_hat += q;
                }
                ds += dot * dot;
                dn += (dot_hat - dot) * (dot_hat - dot);
            }
        }
        let close = |a: Snr, b: f64| (a.ratio() / b - 1.0).abs() < 1e-9;
        assert!(close(r.stages.products, ps / pn));
        assert!(close(r.stages.dot, ds / dn));
        assert!(close(r.stages.weights, snr(&w, &w_hat).unwrap().ratio()));
        assert!(close(
            r.stages.activations,
            snr(&x, &x_hat).unwrap().ratio()
        ));
        let gain = 10.0 * (ds / dn).log10() - 10.0 * (ps / pn).log10();
        assert!((averaging_gain(&r).unwrap() - gain).abs() < 1e-8);
        assert_eq!(r.averaging_gain_db, Some(averaging_gain(&r).unwrap()));
    }

    #[test]
    fn per_block_averages_in_db() {
        let l = |layer, db: f64| LayerSnr {
            layer,
            gemm: "g".into(),
            stages: StageSnr {
                weights: Snr::from_db(db),
                activations: Snr::from_db(db),
                products: Snr::from_db(db),
                dot: Snr::from_db(db + 3.0),
            },
            dot_row_mean_db: None,
        };
        let r = SnrReport::from_layers(vec![l(0, 10.0), l(0, 20.0), l(1, 30.0)]).unwrap();
        let b = r.per_block();
        assert_eq!(b.len(), 2);
        assert!((b[0].1.weights.db().unwrap() - 15.0).abs() < 1e-12);
        assert!((r.averaging_gain_db.unwrap() - 3.0).abs() < 1e-12);
        assert!(SnrReport::from_layers(vec![]).is_err());
    }
}
