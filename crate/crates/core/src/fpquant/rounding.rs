//! Element rounding onto a magnitude codebook.

/// SplitMix64 finalizer.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stateless hash of `(seed, stream, counter)`. Used wherever a random draw
/// must not depend on evaluation order.
pub fn counter_hash(seed: u64, stream: u64, counter: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(stream)).wrapping_add(counter))
}

/// Uniform in `[0, 1)` from `(seed, stream, counter)`.
pub fn counter_uniform(seed: u64, stream: u64, counter: u64) -> f64 {
    (counter_hash(seed, stream, counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Round `v` in `[lo, hi]` up to `hi` with probability `(v - lo)/(hi - lo)`,
/// using the uniform draw `u` in `[0, 1)`. A degenerate interval returns `lo`.
pub fn stochastic_round(v: f64, lo: f64, hi: f64, u: f64) -> f64 {
    debug_assert!(lo <= v && v <= hi, "{lo} <= {v} <= {hi}");
    if hi <= lo {
        return lo;
    }
    let p = (v - lo) / (hi - lo);
    if u < p {
        hi
    } else {
        lo
    }
}

/// Magnitude codebook with precomputed midpoints. Lookups count passed
/// thresholds instead of branching, which matters on random data.
pub(crate) struct Grid<'a> {
    codebook: &'a [f64],
    mids: Vec<f64>,
    /// Midpoints of an 8-entry codebook, for an unrolled lookup.
    mids8: Option<[f64; 7]>,
}

impl<'a> Grid<'a> {
    pub fn new(codebook: &'a [f64]) -> Self {
        let mids: Vec<f64> = codebook.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let mids8 = mids.as_slice().try_into().ok();
        Self {
            codebook,
            mids,
            mids8,
        }
    }

    /// Index of the nearest entry to the non-negative magnitude `a`. Ties
    /// go to the even index, which for E2M1 is the even mantissa. Values
    /// beyond the last entry saturate.
    #[inline]
    pub fn nearest_even(&self, a: f64) -> usize {
        if let Some(m) = &self.mids8 {
            // a tie at an odd midpoint rounds up to the even index above it
            let mut n = 0;
            for (k, &mid) in m.iter().enumerate() {
                n += ((a > mid) | ((k & 1 == 1) & (a == mid))) as usize;
            }
            return n;
        }
        let i = count_below(&self.mids, a);
        if i < self.mids.len() && a == self.mids[i] && i % 2 == 1 {
            i + 1
        } else {
            i
        }
    }

    /// Stochastic counterpart of [`Grid::nearest_even`] with draw `u`:
    /// rounds up with probability equal to the fractional position of `a`
    /// between its neighbours. Values beyond the last entry saturate.
    #[inline]
    pub fn stochastic(&self, a: f64, u: f64) -> usize {
        let n = self.codebook.len();
        let hi = if n == 8 {
            let mut c = 0;
            for &v in self.codebook {
                c += (v < a) as usize;
            }
            c
        } else {
            count_below(self.codebook, a)
        };
        let hi = hi.clamp(1, n - 1);
        let (lo_v, hi_v) = (self.codebook[hi - 1], self.codebook[hi]);
        hi - 1 + (u * (hi_v - lo_v) < a - lo_v) as usize
    }
}

/// Number of entries of the ascending slice `v` strictly below `a`, by a
/// branch-free binary search.
#[inline]
fn count_below(v: &[f64], a: f64) -> usize {
    if v.is_empty() {
        return 0;
    }
    let mut base = 0usize;
    let mut len = v.len();
    while len > 1 {
        let half = len / 2;
        base = if v[base + half] < a {
            base + half
        } else {
            base
        };
        len -= half;
    }
    base + (v[base] < a) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fpquant::E2M1_MAGNITUDES;

    #[test]
    fn lower_endpoint_is_deterministic() {
        for i in 0..1000 {
            let u = counter_uniform(1, 2, i);
            assert_eq!(stochastic_round(2.0, 2.0, 3.0, u), 2.0);
        }
    }

    #[test]
    fn degenerate_interval() {
        assert_eq!(stochastic_round(1.5, 1.5, 1.5, 0.999), 1.5);
    }

    #[test]
    fn midpoint_frequency() {
        let n = 100_000u64;
        let ups = (0..n)
            .filter(|&i| stochastic_round(2.5, 2.0, 3.0, counter_uniform(77, 0, i)) == 3.0)
            .count();
        let f = ups as f64 / n as f64;
        assert!((f - 0.5).abs() < 0.01, "{f}");
    }

    #[test]
    fn unbiased_mean() {
        let n = 100_000u64;
        let mean = (0..n)
            .map(|i| stochastic_round(2.3, 2.0, 3.0, counter_uniform(5, 9, i)))
            .sum::<f64>()
            / n as f64;
        assert!((mean - 2.3).abs() < 0.01, "{mean}");
    }

    /// Brute-force nearest with the even-index tie rule.
    fn oracle(a: f64) -> usize {
        let mut best = 0;
        for (i, &c) in E2M1_MAGNITUDES.iter().enumerate() {
            let d = (c - a).abs();
            let db = (E2M1_MAGNITUDES[best] - a).abs();
            if d < db || (d == db && i % 2 == 0 && best % 2 == 1) {
                best = i;
            }
        }
        best
    }

    #[test]
    fn nearest_matches_enumeration() {
        let g = Grid::new(&E2M1_MAGNITUDES);
        let at = |a| E2M1_MAGNITUDES[g.nearest_even(a)];
        assert_eq!(at(2.4), 2.0);
        assert_eq!(at(2.5), 2.0);
        assert_eq!(at(5.0), 4.0);
        assert_eq!(at(0.25), 0.0);
        assert_eq!(at(0.75), 1.0);
        assert_eq!(at(7.5), 6.0);
        let mut a = 0.0;
        while a <= 7.0 {
            assert_eq!(g.nearest_even(a), oracle(a), "a={a}");
            a += 0.03125;
        }
        for i in 0..10_000u64 {
            let a = 6.5 * counter_uniform(3, 0, i);
            assert_eq!(g.nearest_even(a), oracle(a), "a={a}");
        }
    }

    #[test]
    fn count_below_matches_linear_scan() {
        for n in 0..10 {
            let v: Vec<f64> = (0..n).map(|i| i as f64).collect();
            for k in 0..=(2 * n + 2) {
                let a = k as f64 * 0.5 - 0.5;
                let want = v.iter().filter(|&&x| x < a).count();
                assert_eq!(count_below(&v, a), want, "n={n} a={a}");
            }
        }
    }

    #[test]
    fn stochastic_lands_on_neighbours() {
        let g = Grid::new(&E2M1_MAGNITUDES);
        for i in 0..10_000u64 {
            let a = 6.0 * counter_uniform(4, 0, i);
            let k = g.stochastic(a, counter_uniform(4, 1, i));
            let c = E2M1_MAGNITUDES[k];
            let lo = E2M1_MAGNITUDES.iter().rev().find(|&&v| v <= a).unwrap();
            let hi = E2M1_MAGNITUDES.iter().find(|&&v| v >= a).unwrap();
            assert!(c == *lo || c == *hi, "{a} -> {c}");
        }
        assert_eq!(g.stochastic(9.0, 0.3), 7);
        assert_eq!(g.stochastic(0.0, 0.3), 0);
    }
}
