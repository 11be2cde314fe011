//! Branch-free `exp` and `ln` for the per-pixel hot loops. Both stay within a
//! few ulp of libm on the ranges used here and, unlike libm calls, let the
//! compiler vectorise the surrounding loop.

const LN2_HI: f64 = f64::from_bits(0x3fe6_2e42_fee0_0000);
const LN2_LO: f64 = f64::from_bits(0x3dea_39ef_3579_3c76);
// adding this rounds to an integer kept in the low mantissa bits
const SHIFT: f64 = 6_755_399_441_055_744.0;

/// `e^x` for `x <= 0`. Inputs below -708 are clamped there, so the result
/// never goes subnormal.
#[inline(always)]
pub fn exp_neg(x: f64) -> f64 {
    let x = x.max(-708.0);
    let t = x * std::f64::consts::LOG2_E + SHIFT;
    let kf = t - SHIFT;
    let k = t.to_bits().wrapping_sub(SHIFT.to_bits()) as i64;
    let r = (x - kf * LN2_HI) - kf * LN2_LO;
    // Taylor series to r^13; |r| <= ln2 / 2 leaves a tail below 1e-17
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    p * f64::from_bits(((k + 1023) as u64) << 52)
}

/// `ln x` for positive normal `x`. Smaller inputs are clamped to
/// `f64::MIN_POSITIVE`.
#[inline(always)]
pub fn ln_pos(x: f64) -> f64 {
    let bits = x.max(f64::MIN_POSITIVE).to_bits();
    // split x = 2^e m with m in [sqrt(1/2), sqrt(2))
    let u = bits + (0x3ff0_0000_0000_0000 - 0x3fe6_a09e_667f_3bcd);
    let e = (u >> 52) as i64 - 1023;
    let m = f64::from_bits((u & 0x000f_ffff_ffff_ffff) + 0x3fe6_a09e_667f_3bcd);
    let s = (m - 1.0) / (m + 1.0);
    let s2 = s * s;
    // 2 atanh(s); |s| < 0.172, so the series converges fast
    let mut p = 2.0 / 21.0;
    p = p * s2 + 2.0 / 19.0;
    p = p * s2 + 2.0 / 17.0;
    p = p * s2 + 2.0 / 15.0;
    p = p * s2 + 2.0 / 13.0;
    p = p * s2 + 2.0 / 11.0;
    p = p * s2 + 2.0 / 9.0;
    p = p * s2 + 2.0 / 7.0;
    p = p * s2 + 2.0 / 5.0;
    p = p * s2 + 2.0 / 3.0;
    let ef = e as f64;
    ef * LN2_HI + (s * s2 * p + (2.0 * s + ef * LN2_LO))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ulps(a: f64, b: f64) -> f64 {
        (a - b).abs() / (b.abs() * f64::EPSILON)
    }

    #[test]
    fn exp_fixed_points() {
        assert_eq!(exp_neg(0.0), 1.0);
        assert!(ulps(exp_neg(-1.0), (-1.0f64).exp()) <= 2.0);
        assert!(exp_neg(-1e6) > 0.0);
        assert!(exp_neg(-1e6) < 1e-300);
    }

    #[test]
    fn ln_fixed_points() {
        assert_eq!(ln_pos(1.0), 0.0);
        assert!(ulps(ln_pos(std::f64::consts::E), 1.0) <= 2.0);
        assert!(ulps(ln_pos(0.5), -std::f64::consts::LN_2) <= 2.0);
        assert_eq!(ln_pos(0.0), f64::MIN_POSITIVE.ln());
    }

    proptest! {
        #[test]
        fn exp_matches_libm(x in -700.0f64..=0.0) {
            prop_assert!(ulps(exp_neg(x), x.exp()) <= 4.0, "x={x}");
        }

        #[test]
        fn ln_matches_libm(x in 1e-300f64..1e3) {
            let want = x.ln();
            prop_assert!((ln_pos(x) - want).abs() <= 4.0 * f64::EPSILON * want.abs().max(1.0), "x={x}");
        }

        #[test]
        fn ln_near_one(d in -0.3f64..0.3) {
            let x = 1.0 + d;
            let want = x.ln();
            prop_assert!((ln_pos(x) - want).abs() <= 4.0 * f64::EPSILON * want.abs().max(f64::MIN_POSITIVE), "x={x}");
        }
    }
}
