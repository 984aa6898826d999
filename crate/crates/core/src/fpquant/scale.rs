//! Scale grids for block and tensor scales.
//!
//! E4M3 is emulated as a value-grid projection: 4 exponent bits (bias 7),
//! 3 mantissa bits, subnormals, max finite magnitude 448. Only the set of
//! representable values matters here, so there is no bit-level encoding.

/// Largest finite E4M3 magnitude.
pub const E4M3_MAX: f64 = 448.0;
/// Smallest normal E4M3 magnitude, 2^-6.
pub const E4M3_MIN_NORMAL: f64 = 0.015_625;
/// Subnormal spacing, 2^-9.
pub const E4M3_SUBNORMAL_STEP: f64 = 0.001_953_125;

/// Round half to even on an integer grid.
pub(crate) fn round_half_even(x: f64) -> f64 {
    let r = x.round();
    if (r - x).abs() == 0.5 {
        2.0 * (x / 2.0).round()
    } else {
        r
    }
}

/// Exponent `e` such that `2^e <= x < 2^(e+1)` for finite positive `x`.
fn floor_log2(x: f64) -> i32 {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    if exp == 0 {
        // f64 subnormal; far below anything E4M3 can represent
        -1075
    } else {
        exp - 1023
    }
}

/// Project a non-negative magnitude onto the E4M3 grid, nearest with ties to
/// even mantissa, saturating at 448.
pub fn round_e4m3(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x >= E4M3_MAX {
        return E4M3_MAX;
    }
    if x < E4M3_MIN_NORMAL {
        return round_half_even(x / E4M3_SUBNORMAL_STEP) * E4M3_SUBNORMAL_STEP;
    }
    let e = floor_log2(x);
    let step = 2f64.powi(e - 3);
    (round_half_even(x / step) * step).min(E4M3_MAX)
}

/// Largest E4M3 value strictly below `x` (which must itself be on the grid).
/// Returns 0 for the smallest subnormal.
pub fn prev_e4m3(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    if x <= E4M3_MIN_NORMAL {
        return (x - E4M3_SUBNORMAL_STEP).max(0.0);
    }
    let e = floor_log2(x);
    // at an exact power of two the spacing below is half the spacing above
    let below = if x == 2f64.powi(e) { e - 1 } else { e };
    x - 2f64.powi(below - 3)
}

/// Round to the nearest f32, returned as f64.
pub fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Every E4M3 magnitude, built from the bit fields.
    fn e4m3_grid() -> Vec<f64> {
        let mut out = Vec::new();
        for e in 0..16u32 {
            for m in 0..8u32 {
                if e == 15 && m == 7 {
                    continue; // NaN encoding
                }
                let v = if e == 0 {
                    m as f64 / 8.0 * 2f64.powi(-6)
                } else {
                    (1.0 + m as f64 / 8.0) * 2f64.powi(e as i32 - 7)
                };
                out.push(v);
            }
        }
        out
    }

    #[test]
    fn grid_endpoints() {
        let g = e4m3_grid();
        assert_eq!(*g.last().unwrap(), 448.0);
        assert_eq!(g[1], E4M3_SUBNORMAL_STEP);
        assert_eq!(g.len(), 127);
    }

    #[test]
    fn rounding_matches_brute_force_nearest() {
        let g = e4m3_grid();
        let mut x = 1e-4;
        while x < 500.0 {
            let got = round_e4m3(x);
            let best = g
                .iter()
                .map(|&c| (c - x).abs())
                .fold(f64::INFINITY, f64::min);
            assert!(g.contains(&got), "{got} not on grid");
            if x <= 448.0 {
                assert_eq!((got - x).abs(), best, "x={x}");
            }
            x *= 1.0137;
        }
    }

    #[test]
    fn grid_values_are_fixed_points() {
        for &c in &e4m3_grid() {
            assert_eq!(round_e4m3(c), c);
        }
    }

    #[test]
    fn prev_walks_the_grid() {
        let g = e4m3_grid();
        for w in g.windows(2) {
            assert_eq!(prev_e4m3(w[1]), w[0], "prev of {}", w[1]);
        }
    }

    #[test]
    fn ties_go_to_even_mantissa() {
        // 1.0625 sits halfway between 1.0 (m=0) and 1.125 (m=1)
        assert_eq!(round_e4m3(1.0625), 1.0);
        // 1.1875 between 1.125 (m=1) and 1.25 (m=2)
        assert_eq!(round_e4m3(1.1875), 1.25);
    }
}
