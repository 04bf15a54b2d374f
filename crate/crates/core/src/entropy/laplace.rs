//! Integer-only discretized Laplace tables.
//!
//! Parameters are fixed point with 16 fractional bits and the CDF is evaluated
//! with a Q32 `exp(-u)` built from shifts, multiplies and integer division, so
//! the same parameters produce the same table bytes on every platform.

use std::sync::OnceLock;

use super::{CdfTable, TOTAL};

const ONE_Q16: i64 = 1 << 16;
/// Alphabet of the coded residuals of `y`.
pub const Y_MIN: i32 = -128;
pub const Y_MAX: i32 = 127;

/// Smallest scale a prior may predict, in latent units.
pub const SCALE_MIN: f64 = 0.01;

/// Number of quantized scale levels the `y` tables are built for.
pub const SCALE_LEVELS: usize = 64;
/// First level, `0.01` in Q16.
const LEVEL0_Q16: i64 = 655;
/// Ratio between neighbouring levels, `1.15` in Q16.
const LEVEL_RATIO_Q16: i64 = 75_366;

const LOG2E_Q60: u128 = 1_663_314_137_230_540_311;
const LN2_Q62: u128 = 3_196_577_161_300_663_915;
const ONE_Q62: u128 = 1 << 62;

/// `exp(-u) * 2^32` for `u >= 0` given in Q16.
pub(crate) fn exp_neg_q32(u_q16: u64) -> u64 {
    // exp(-u) = 2^-(u log2 e); split the exponent into integer and fraction.
    let v = (u_q16 as u128 * LOG2E_Q60) >> 44;
    let whole = v >> 32;
    if whole >= 40 {
        return 0;
    }
    let frac = v & 0xFFFF_FFFF;
    // 2^-frac = exp(-t) with t = frac * ln 2 < 0.694, by Taylor series in Q62.
    let t = (frac * LN2_Q62) >> 32;
    let mut term = ONE_Q62;
    let mut sum: i128 = ONE_Q62 as i128;
    for k in 1..=16u128 {
        term = ((term * t) >> 62) / k;
        if k % 2 == 1 {
            sum -= term as i128;
        } else {
            sum += term as i128;
        }
    }
    let q32 = ((sum.max(0) as u128 + (1 << 29)) >> 30) as u64;
    q32 >> whole
}

/// Laplace CDF at offset `t` (Q16) from the mean with scale `b` (Q16), in Q32.
fn laplace_cdf_q32(t_q16: i64, b_q16: i64) -> u64 {
    let u = ((t_q16.unsigned_abs() as u128) << 16) / b_q16 as u128;
    let half_tail = exp_neg_q32(u.min(u64::MAX as u128) as u64) / 2;
    if t_q16 < 0 {
        half_tail
    } else {
        (1u64 << 32) - half_tail
    }
}

/// Builds the table for symbols `min..=max` from a Laplace with fixed-point
/// mean and scale. Mass beyond the edges folds into the edge symbols, every
/// symbol gets frequency at least 1, and the rounding remainder goes to the
/// symbol whose bin contains the mean.
pub fn discretize_laplace_q16(mean_q16: i64, scale_q16: i64, min: i32, max: i32) -> CdfTable {
    assert!(max >= min && ((max - min + 1) as u32) <= TOTAL, "bad alphabet {min}..={max}");
    let b = scale_q16.max(1);
    let n = (max - min + 1) as usize;
    let mut cdf = Vec::with_capacity(n + 1);
    cdf.push(0u64);
    for k in 1..n {
        let edge = ((min as i64 + k as i64) << 16) - ONE_Q16 / 2;
        cdf.push(laplace_cdf_q32(edge - mean_q16, b));
    }
    cdf.push(1u64 << 32);

    let spread = (TOTAL as u128) - n as u128;
    let mut freqs: Vec<u32> = cdf
        .windows(2)
        .map(|w| (((w[1] - w[0]) as u128 * spread) >> 32) as u32 + 1)
        .collect();
    let used: u32 = freqs.iter().sum();
    let mode = {
        let m = if mean_q16 >= 0 {
            (mean_q16 + ONE_Q16 / 2) >> 16
        } else {
            -((-mean_q16 + ONE_Q16 / 2) >> 16)
        };
        (m.clamp(min as i64, max as i64) - min as i64) as usize
    };
    freqs[mode] += TOTAL - used;
    CdfTable::from_frequencies(min, &freqs).expect("laplace frequencies are valid by construction")
}

/// Real-parameter front end; parameters are rounded to Q16 first.
pub fn discretize_laplace(mean: f64, scale: f64, min: i32, max: i32) -> CdfTable {
    let scale = scale.max(SCALE_MIN);
    discretize_laplace_q16(
        (mean * ONE_Q16 as f64).round() as i64,
        (scale * ONE_Q16 as f64).round() as i64,
        min,
        max,
    )
}

/// Geometric scale levels in Q16, from 0.01 upward by a factor of 1.15.
pub fn scale_levels_q16() -> &'static [i64; SCALE_LEVELS] {
    static LEVELS: OnceLock<[i64; SCALE_LEVELS]> = OnceLock::new();
    LEVELS.get_or_init(|| {
        let mut l = [0i64; SCALE_LEVELS];
        l[0] = LEVEL0_Q16;
        for k in 1..SCALE_LEVELS {
            l[k] = (l[k - 1] * LEVEL_RATIO_Q16) >> 16;
        }
        l
    })
}

/// Largest level not above `scale_q16` (level 0 for anything smaller).
pub fn scale_level(scale_q16: i64) -> usize {
    let levels = scale_levels_q16();
    levels.partition_point(|&l| l <= scale_q16).saturating_sub(1)
}

/// Zero-mean tables over the `y` alphabet, one per scale level.
pub fn y_tables() -> &'static [CdfTable] {
    static TABLES: OnceLock<Vec<CdfTable>> = OnceLock::new();
    TABLES.get_or_init(|| {
        scale_levels_q16()
            .iter()
            .map(|&b| discretize_laplace_q16(0, b, Y_MIN, Y_MAX))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_neg_matches_float() {
        for i in 0..2000u64 {
            let u = i as f64 * 0.0173;
            let got = exp_neg_q32((u * 65536.0).round() as u64) as f64 / 4294967296.0;
            let want = (-((u * 65536.0).round() / 65536.0)).exp();
            assert!((got - want).abs() < 2e-9, "u={u}: {got} vs {want}");
        }
        assert_eq!(exp_neg_q32(0), 1u64 << 32);
        assert_eq!(exp_neg_q32(u64::MAX / 2), 0);
    }

    #[test]
    fn unit_scale_center_mass() {
        let t = discretize_laplace(0.0, 1.0, -32, 32);
        let p0 = t.probability(0).unwrap();
        let want = 1.0 - (-0.5f64).exp();
        assert!((p0 - want).abs() < 1.5e-3, "{p0} vs {want}");
    }

    #[test]
    fn wide_scale_is_near_uniform() {
        // Interior bins flatten out; the edges carry the folded tails.
        let t = discretize_laplace(0.0, 1.0e3, -8, 7);
        let f1 = t.frequency(1).unwrap();
        for s in (-7..=6).filter(|&s| s != 0) {
            assert!(t.frequency(s).unwrap().abs_diff(f1) <= 1, "{s}");
        }
        assert!(t.frequency(-8).unwrap() > t.frequency(0).unwrap());
    }

    #[test]
    fn zero_mean_is_symmetric() {
        for &b in &[0.01, 0.3, 1.0, 4.5, 40.0, 5000.0] {
            let t = discretize_laplace(0.0, b, -32, 32);
            for s in 1..=32 {
                assert_eq!(t.frequency(s), t.frequency(-s), "b={b} s={s}");
            }
        }
    }

    #[test]
    fn tail_mass_folds_into_edges() {
        // Mean far right of the alphabet: almost everything lands on `max`.
        let t = discretize_laplace(50.0, 1.0, -4, 4);
        assert!(t.probability(4).unwrap() > 0.99);
        let t = discretize_laplace(-50.0, 1.0, -4, 4);
        assert!(t.probability(-4).unwrap() > 0.99);
    }

    #[test]
    fn golden_table_bytes() {
        // Frozen output of the integer construction; any change to the
        // arithmetic breaks stream compatibility.
        let t = discretize_laplace_q16(0, 1 << 16, -3, 3);
        assert_eq!(t.cum(), &[0, 2690, 7312, 19874, 45662, 58224, 62846, 65536]);
        let t = discretize_laplace_q16(-(3 << 14), 45_000, -2, 2);
        assert_eq!(t.cum(), &[0, 10992, 42768, 60229, 64299, 65536]);
    }

    #[test]
    fn levels_are_increasing() {
        let l = scale_levels_q16();
        assert_eq!(l[0], 655);
        assert!(l.windows(2).all(|w| w[1] > w[0]));
        assert!(l[SCALE_LEVELS - 1] as f64 / 65536.0 > 60.0);
        assert_eq!(scale_level(0), 0);
        assert_eq!(scale_level(655), 0);
        assert_eq!(scale_level(l[5]), 5);
        assert_eq!(scale_level(l[5] - 1), 4);
        assert_eq!(scale_level(i64::MAX), SCALE_LEVELS - 1);
    }
}
