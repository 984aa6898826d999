//! Simulated NVFP4 block quantization.
//!
//! A tensor is quantized along its last axis in blocks of `block_size`
//! elements. Each block gets one scale (`block_amax / 6`, projected onto the
//! E4M3 grid); each element is divided by its composed scale, rounded onto
//! the signed E2M1 codebook and clamped to ±6. An optional FP32 per-tensor
//! scale maps the global amax onto the top of the block-scale range first,
//! and an optional randomized Hadamard transform rotates the last axis
//! before quantization and back after dequantization.
//!
//! Everything is a pure function of `(tensor, config)`. Stochastic rounding
//! draws from a counter-based stream keyed by `(seed, element index)`, so
//! results do not depend on evaluation order or thread count.

mod hadamard;
mod rounding;
mod scale;

pub use hadamard::{hadamard_segments, hadamard_transform, segment_len, sign_diagonal};
pub use rounding::{counter_hash, counter_uniform, stochastic_round};
pub use scale::{prev_e4m3, round_e4m3, round_f32, E4M3_MAX, E4M3_MIN_NORMAL};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensorcore::Tensor;
use rounding::Grid;

/// Non-negative E2M1 magnitudes.
pub const E2M1_MAGNITUDES: [f64; 8] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];

const SR_STREAM: u64 = 0x5352_4f55_4e44;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },
    #[error("cannot quantize an empty tensor")]
    Empty,
    #[error("{axis} axis segment length {len} is not a power of two")]
    NotPowerOfTwo { axis: &'static str, len: usize },
    #[error("invalid quantization config: {0}")]
    InvalidConfig(String),
}

/// Grid the block scales live on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleFormat {
    /// E4M3 value grid, max 448.
    E4m3,
    /// Unclamped FP32 scales.
    ExactFloat,
}

impl ScaleFormat {
    fn max_scale(self) -> f64 {
        match self {
            ScaleFormat::E4m3 => E4M3_MAX,
            ScaleFormat::ExactFloat => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rounding {
    NearestEven,
    Stochastic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    pub block_size: usize,
    /// Representable magnitudes, ascending, starting at 0. The signed
    /// codebook is this set mirrored about zero.
    pub codebook: Vec<f64>,
    pub scale_format: ScaleFormat,
    pub per_tensor_scale: bool,
    pub rounding: Rounding,
    pub rht: bool,
    pub seed: u64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self::nvfp4()
    }
}

impl QuantConfig {
    /// Block 16, E2M1 elements, E4M3 block scales, FP32 tensor scale,
    /// nearest-even rounding, no Hadamard transform.
    pub fn nvfp4() -> Self {
        Self {
            block_size: 16,
            codebook: E2M1_MAGNITUDES.to_vec(),
            scale_format: ScaleFormat::E4m3,
            per_tensor_scale: true,
            rounding: Rounding::NearestEven,
            rht: false,
            seed: 0,
        }
    }

    /// The full standard training recipe: per-tensor scaling, Hadamard
    /// transform and stochastic rounding of gradients.
    pub fn nvfp4_full() -> Self {
        Self {
            rht: true,
            rounding: Rounding::Stochastic,
            ..Self::nvfp4()
        }
    }

    /// Stochastic rounding only; no per-tensor scale and no transform.
    pub fn nvfp4_lean() -> Self {
        Self {
            per_tensor_scale: false,
            rounding: Rounding::Stochastic,
            ..Self::nvfp4()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_rounding(mut self, rounding: Rounding) -> Self {
        self.rounding = rounding;
        self
    }

    pub fn max_magnitude(&self) -> f64 {
        *self.codebook.last().unwrap_or(&0.0)
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        let bad = |m: &str| Err(QuantError::InvalidConfig(m.to_string()));
        if self.block_size == 0 {
            return bad("block_size must be positive");
        }
        if self.codebook.len() < 2 {
            return bad("codebook needs at least two magnitudes");
        }
        if self.codebook[0] != 0.0 {
            return bad("codebook must start at zero");
        }
        if self
            .codebook
            .windows(2)
            .any(|w| !(w[0] < w[1]) || !w[1].is_finite())
        {
            return bad("codebook must be finite and strictly ascending");
        }
        if self.codebook.len() > i32::MAX as usize {
            return bad("codebook too large");
        }
        Ok(())
    }

    /// Midpoint of the two largest magnitudes.
    fn top_midpoint(&self) -> f64 {
        let n = self.codebook.len();
        0.5 * (self.codebook[n - 2] + self.codebook[n - 1])
    }

    /// Scale for a block with (tensor-scaled) amax `amax`.
    ///
    /// The E4M3 rounding is nearest. Near the bottom of the subnormal range
    /// the nearest scale can leave the block maximum below the top codebook
    /// midpoint; the scale then steps down one grid value so the maximum
    /// always encodes as the top code (clamped). That keeps quantization a
    /// projection: re-encoding a decoded block reproduces its scale.
    pub fn block_scale(&self, amax: f64) -> f64 {
        if amax == 0.0 {
            return 0.0;
        }
        let target = amax / self.max_magnitude();
        match self.scale_format {
            ScaleFormat::E4m3 => {
                let s = round_e4m3(target);
                if s > 0.0 && amax / s < self.top_midpoint() {
                    prev_e4m3(s)
                } else {
                    s
                }
            }
            ScaleFormat::ExactFloat => round_f32(target),
        }
    }
}

/// Encoded form of a tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    /// Signed codebook index per element (`sign * index`).
    pub codes: Vec<i32>,
    /// One scale per block, row-major over `(row, block)`.
    pub block_scales: Vec<f64>,
    pub tensor_scale: Option<f64>,
    pub config: QuantConfig,
}

impl QuantizedTensor {
    pub fn blocks_per_row(&self) -> usize {
        let cols = *self.shape.last().unwrap_or(&0);
        cols.div_ceil(self.config.block_size)
    }

    /// Composed scale for element `(row, col)`.
    pub fn composed_scale(&self, row: usize, col: usize) -> f64 {
        let b = self.block_scales[row * self.blocks_per_row() + col / self.config.block_size];
        b * self.tensor_scale.unwrap_or(1.0)
    }
}

fn check_input(t: &Tensor) -> Result<(), QuantError> {
    if t.is_empty() || t.cols() == 0 {
        return Err(QuantError::Empty);
    }
    if let Some(index) = t.first_non_finite() {
        return Err(QuantError::NonFinite { index });
    }
    Ok(())
}

/// Walk the blocks of `t` (after the optional transform), handing the
/// tensor scale, each block's scale and its signed codes to `emit`.
fn quantize_blocks(
    t: &Tensor,
    cfg: &QuantConfig,
    mut emit: impl FnMut(Option<f64>, f64, &[i32]),
) -> Result<Option<f64>, QuantError> {
    check_input(t)?;
    cfg.validate()?;
    let mut transformed;
    let data = if cfg.rht {
        transformed = t.data().to_vec();
        hadamard::rht_rows(&mut transformed, t.shape(), cfg.seed, false)?;
        transformed.as_slice()
    } else {
        t.data()
    };
    let cols = t.cols();
    let bs = cfg.block_size;
    let grid = Grid::new(&cfg.codebook);
    let top = cfg.codebook.len() as i32 - 1;

    let tensor_scale = cfg.per_tensor_scale.then(|| {
        let amax = data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        round_f32(amax / (cfg.max_magnitude() * cfg.scale_format.max_scale()))
    });
    let ts = tensor_scale.unwrap_or(1.0);

    let mut scaled = vec![0.0; bs];
    let mut codes = vec![0i32; bs];
    for (r, row) in data.chunks(cols).enumerate() {
        for (b, block) in row.chunks(bs).enumerate() {
            let n = block.len();
            let (scaled, codes) = (&mut scaled[..n], &mut codes[..n]);
            if ts == 0.0 {
                // all-zero tensor (or amax below the FP32 range)
                codes.fill(0);
                emit(tensor_scale, 0.0, codes);
                continue;
            }
            for (d, &v) in scaled.iter_mut().zip(block) {
                *d = if cfg.per_tensor_scale { v / ts } else { v };
            }
            let amax = scaled.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let s = cfg.block_scale(amax);
            for (j, (&v, c)) in scaled.iter().zip(codes.iter_mut()).enumerate() {
                if s == 0.0 || v == 0.0 {
                    *c = 0;
                    continue;
                }
                let a = v.abs();
                let idx = if a == amax {
                    top
                } else {
                    let x = a / s;
                    (match cfg.rounding {
                        Rounding::NearestEven => grid.nearest_even(x),
                        Rounding::Stochastic => {
                            let counter = (r * cols + b * bs + j) as u64;
                            grid.stochastic(x, counter_uniform(cfg.seed, SR_STREAM, counter))
                        }
                    }) as i32
                };
                *c = if v < 0.0 { -idx } else { idx };
            }
            emit(tensor_scale, s, codes);
        }
    }
    Ok(tensor_scale)
}

/// Quantize `t` along its last axis.
pub fn encode(t: &Tensor, cfg: &QuantConfig) -> Result<QuantizedTensor, QuantError> {
    let mut codes = Vec::with_capacity(t.len());
    let mut block_scales = Vec::with_capacity(t.rows() * t.cols().div_ceil(cfg.block_size.max(1)));
    let tensor_scale = quantize_blocks(t, cfg, |_, s, c| {
        block_scales.push(s);
        codes.extend_from_slice(c);
    })?;
    Ok(QuantizedTensor {
        shape: t.shape().to_vec(),
        codes,
        block_scales,
        tensor_scale,
        config: cfg.clone(),
    })
}

/// Value of one code: `(codebook * block_scale) * tensor_scale`.
#[inline]
fn dequant(cfg: &QuantConfig, c: i32, s: f64, ts: Option<f64>) -> f64 {
    let mag = cfg.codebook[c.unsigned_abs() as usize] * s;
    let mag = match ts {
        Some(ts) => mag * ts,
        None => mag,
    };
    if c < 0 {
        -mag
    } else {
        mag
    }
}

/// Reconstruct real values from an encoding, in the original basis.
pub fn decode(q: &QuantizedTensor) -> Result<Tensor, QuantError> {
    let cfg = &q.config;
    let cols = *q.shape.last().ok_or(QuantError::Empty)?;
    if cols == 0 || q.codes.is_empty() {
        return Err(QuantError::Empty);
    }
    let bpr = q.blocks_per_row();
    let mut data = Vec::with_capacity(q.codes.len());
    for (r, row) in q.codes.chunks(cols).enumerate() {
        for (b, block) in row.chunks(cfg.block_size).enumerate() {
            let s = q.block_scales[r * bpr + b];
            data.extend(block.iter().map(|&c| dequant(cfg, c, s, q.tensor_scale)));
        }
    }
    if cfg.rht {
        hadamard::rht_rows(&mut data, &q.shape, cfg.seed, true)?;
    }
    Tensor::new(q.shape.clone(), data).map_err(|_| QuantError::Empty)
}

/// `decode(encode(t))`, without materializing the codes.
pub fn fake_quant(t: &Tensor, cfg: &QuantConfig) -> Result<Tensor, QuantError> {
    let mut data = Vec::with_capacity(t.len());
    quantize_blocks(t, cfg, |ts, s, c| {
        data.extend(c.iter().map(|&c| dequant(cfg, c, s, ts)))
    })?;
    if cfg.rht {
        hadamard::rht_rows(&mut data, t.shape(), cfg.seed, true)?;
    }
    Ok(Tensor::new(t.shape().to_vec(), data).expect("shape unchanged"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block(vals: &[f64]) -> Tensor {
        Tensor::new(vec![1, vals.len()], vals.to_vec()).unwrap()
    }

    fn exact_scales() -> QuantConfig {
        QuantConfig {
            per_tensor_scale: false,
            ..QuantConfig::nvfp4()
        }
    }

    #[test]
    fn zeros_stay_zero() {
        let t = Tensor::zeros(&[2, 16]);
        for cfg in [
            QuantConfig::nvfp4(),
            exact_scales(),
            QuantConfig::nvfp4_full(),
        ] {
            assert!(fake_quant(&t, &cfg)
                .unwrap()
                .data()
                .iter()
                .all(|&v| v == 0.0));
        }
    }

    #[test]
    fn codebook_endpoint_round_trips() {
        let t = block(&[6.0; 16]);
        let out = fake_quant(&t, &exact_scales()).unwrap();
        assert!(out.data().iter().all(|&v| v == 6.0));
    }

    #[test]
    fn nearest_entry_and_tie() {
        let mut v = vec![0.0; 16];
        v[0] = 6.0;
        v[1] = 2.4;
        v[2] = 2.5;
        v[3] = -2.5;
        let out = fake_quant(&block(&v), &exact_scales()).unwrap();
        assert_eq!(out.data()[1], 2.0);
        assert_eq!(out.data()[2], 2.0);
        assert_eq!(out.data()[3], -2.0);
    }

    #[test]
    fn block_scale_from_amax() {
        let mut v = vec![1.0; 16];
        v[5] = 12.0;
        let q = encode(&block(&v), &exact_scales()).unwrap();
        assert_eq!(q.block_scales, vec![2.0]);
        assert_eq!(q.codes[5], 7);
        assert_eq!(decode(&q).unwrap().data()[5], 12.0);
    }

    #[test]
    fn negative_block_mirrors_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..5.0)).collect();
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let p = encode(&block(&v), &QuantConfig::nvfp4()).unwrap();
        let n = encode(&block(&neg), &QuantConfig::nvfp4()).unwrap();
        assert_eq!(p.block_scales, n.block_scales);
        for (a, b) in p.codes.iter().zip(&n.codes) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn tensor_scale_power_of_two_is_transparent() {
        // global amax 6 * 448 * 2^-3 gives a tensor scale of exactly 2^-3,
        // which commutes with the E4M3 grid
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut t = Tensor::randn(&[4, 32], 20.0, &mut rng);
        t.data_mut()[7] = 6.0 * 448.0 / 8.0;
        for v in t.data_mut() {
            *v = v.clamp(-336.0, 336.0);
        }
        let on = fake_quant(&t, &QuantConfig::nvfp4()).unwrap();
        let off = fake_quant(&t, &exact_scales()).unwrap();
        assert_eq!(on, off);
    }

    #[test]
    fn partial_final_block_is_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Tensor::randn(&[3, 20], 1.0, &mut rng);
        let q = encode(&t, &QuantConfig::nvfp4()).unwrap();
        assert_eq!(q.block_scales.len(), 6);
        assert_eq!(decode(&q).unwrap().shape(), &[3, 20]);
    }

    #[test]
    fn rejects_bad_input() {
        let mut t = Tensor::zeros(&[2, 16]);
        t.data_mut()[19] = f64::NAN;
        assert_eq!(
            fake_quant(&t, &QuantConfig::nvfp4()),
            Err(QuantError::NonFinite { index: 19 })
        );
        let e = Tensor::new(vec![0, 16], vec![]).unwrap();
        assert_eq!(
            fake_quant(&e, &QuantConfig::nvfp4()),
            Err(QuantError::Empty)
        );
    }

    #[test]
    fn rejects_bad_codebook() {
        let cfg = QuantConfig {
            codebook: vec![0.0, 2.0, 1.0],
            ..QuantConfig::nvfp4()
        };
        assert!(matches!(
            fake_quant(&Tensor::zeros(&[1, 4]), &cfg),
            Err(QuantError::InvalidConfig(_))
        ));
    }

    #[test]
    fn tiny_subnormal_blocks_keep_top_code() {
        // amax/6 = 1.6 * 2^-9 rounds to a scale of 2 * 2^-9, which would put
        // the maximum at code 4.8 -> 4; the scale steps down instead
        let amax = 6.0 * 1.6 * 2f64.powi(-9);
        let mut v = vec![0.0; 16];
        v[0] = amax;
        v[1] = amax / 3.0;
        let cfg = exact_scales();
        let q = encode(&block(&v), &cfg).unwrap();
        assert_eq!(q.codes[0], 7);
        let once = decode(&q).unwrap();
        assert_eq!(fake_quant(&once, &cfg).unwrap(), once);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = Tensor::randn(&[8, 64], 1.0, &mut rng);
        let cfg = QuantConfig::nvfp4_full().with_seed(42);
        assert_eq!(fake_quant(&t, &cfg).unwrap(), fake_quant(&t, &cfg).unwrap());
        let other = fake_quant(&t, &cfg.clone().with_seed(43)).unwrap();
        assert_ne!(fake_quant(&t, &cfg).unwrap(), other);
    }
}
