//! Portable scalar math.
//!
//! Every transcendental used by the crate goes through these routines instead
//! of libm so that a given seed produces the same bits on every platform:
//! system `exp`/`tanh`/`log` are allowed to differ in the last ulp between
//! libc implementations, which would break byte-identical checkpoints and
//! reports. `sqrt` is exempt (IEEE 754 requires correct rounding in hardware).
//!
//! Accuracy is ~1 ulp over the ranges the crate exercises; all polynomial
//! evaluations use fixed-order Horner forms.

use crate::error::{Error, Result};

const LN2: f64 = core::f64::consts::LN_2;

/// 2^k as f64 for integer k, exact through the normal and subnormal range.
fn exp2i(k: i64) -> f64 {
    if k >= 1024 {
        f64::INFINITY
    } else if k >= -1022 {
        f64::from_bits(((1023 + k) as u64) << 52)
    } else if k >= -1074 {
        // Subnormal range: the value 2^k is the raw significand bit.
        f64::from_bits(1u64 << (k + 1074) as u64)
    } else {
        0.0
    }
}

/// e^x with argument reduction x = k·ln2 + r, |r| ≤ ln2/2, and a fixed-order
/// Taylor kernel for e^r.
pub fn exp(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x > 709.8 {
        return f64::INFINITY;
    }
    if x < -745.2 {
        return 0.0;
    }
    let k = (x / LN2).round();
    // Two-part ln2 keeps r = x − k·ln2 accurate for large |k|.
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor e^r = Σ r^n/n!, n ≤ 16; |r| ≤ 0.3466 makes the tail < 1e-19.
    let mut sum = 1.0;
    let mut n = 16u32;
    while n >= 1 {
        sum = 1.0 + sum * r / (n as f64);
        n -= 1;
    }
    sum * exp2i(k as i64)
}

/// Natural log via reduction to m ∈ [√2/2, √2) and the atanh series
/// ln m = 2·Σ t^(2k+1)/(2k+1), t = (m−1)/(m+1).
pub fn ln(x: f64) -> Result<f64> {
    if x.is_nan() || x < 0.0 {
        return Err(Error::Domain(format!("ln of non-positive or NaN value {x}")));
    }
    if x == 0.0 {
        return Err(Error::Domain("ln of zero".into()));
    }
    if x.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let bits = x.to_bits();
    let mut e = ((bits >> 52) & 0x7ff) as i64 - 1023;
    let mut m = if e == -1023 {
        // Subnormal: renormalize first.
        let x = x * exp2i(54);
        let b = x.to_bits();
        e = ((b >> 52) & 0x7ff) as i64 - 1023 - 54;
        f64::from_bits((b & 0x000f_ffff_ffff_ffff) | (1023u64 << 52))
    } else {
        f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | (1023u64 << 52))
    };
    if m > core::f64::consts::SQRT_2 {
        m *= 0.5;
        e += 1;
    }
    let t = (m - 1.0) / (m + 1.0);
    let t2 = t * t;
    // Odd powers through t^25; |t| ≤ 0.1716 makes the tail < 1e-18.
    let mut s = 1.0 / 25.0;
    let mut k = 23i32;
    while k >= 1 {
        s = 1.0 / (k as f64) + s * t2;
        k -= 2;
    }
    Ok((e as f64) * LN2 + 2.0 * t * s)
}

/// tanh via e^{2|x|}; saturates to ±1 at |x| ≥ 20 (error below half an ulp).
pub fn tanh(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let a = x.abs();
    if a >= 20.0 {
        return if x > 0.0 { 1.0 } else { -1.0 };
    }
    if a < 1e-10 {
        return x;
    }
    let y = exp(2.0 * a);
    let t = (y - 1.0) / (y + 1.0);
    if x > 0.0 {
        t
    } else {
        -t
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let y = exp(x);
        y / (1.0 + y)
    }
}

/// σ'(x) = σ(x)·σ(−x); stays accurate in both saturation tails.
pub fn sigmoid_prime(x: f64) -> f64 {
    sigmoid(x) * sigmoid(-x)
}

/// Symmetric difference quotient (f(x+h) − f(x−h)) / 2h.
pub fn central_difference<F>(mut f: F, x: f64, h: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Range(format!("central_difference step h={h} must be positive and finite")));
    }
    let fp = f(x + h)?;
    let fm = f(x - h)?;
    if !fp.is_finite() || !fm.is_finite() {
        return Err(Error::Domain(format!(
            "central_difference saw non-finite samples f(x±h) = ({fp}, {fm}) at x={x}"
        )));
    }
    Ok((fp - fm) / (2.0 * h))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn exp_matches_reference_over_working_range() {
        let mut x = -60.0;
        while x <= 60.0 {
            assert!(rel(exp(x), x.exp()) < 1e-14, "exp({x}) = {} vs {}", exp(x), x.exp());
            x += 0.137;
        }
        assert_eq!(exp(0.0), 1.0);
        assert_eq!(exp(f64::NEG_INFINITY), 0.0);
        assert!(exp(f64::INFINITY).is_infinite());
    }

    #[test]
    fn exp_extreme_arguments_saturate() {
        assert_eq!(exp(-800.0), 0.0);
        assert!(exp(800.0).is_infinite());
        assert!(exp(-700.0) > 0.0);
    }

    #[test]
    fn ln_matches_reference_and_inverts_exp() {
        for &x in &[1e-12, 1e-6, 0.1, 0.5, 1.0, 1.5, 2.0, 10.0, 1e6, 1e12] {
            assert!(rel(ln(x).unwrap(), x.ln()) < 1e-14, "ln({x})");
        }
        let mut x = 0.05f64;
        while x < 40.0 {
            assert!(rel(ln(exp(x)).unwrap(), x) < 1e-13);
            x += 0.61;
        }
    }

    #[test]
    fn ln_rejects_non_positive() {
        assert!(ln(0.0).is_err());
        assert!(ln(-1.0).is_err());
        assert!(ln(f64::NAN).is_err());
    }

    #[test]
    fn tanh_matches_reference_and_saturates() {
        let mut x = -19.0;
        while x <= 19.0 {
            assert!(rel(tanh(x), x.tanh()) < 5e-14, "tanh({x})");
            x += 0.171;
        }
        assert_eq!(tanh(25.0), 1.0);
        assert_eq!(tanh(-25.0), -1.0);
        assert_eq!(tanh(0.0), 0.0);
    }

    #[test]
    fn sigmoid_complement_identity() {
        let mut x = -40.0;
        while x <= 40.0 {
            let s = sigmoid(x) + sigmoid(-x);
            assert!((s - 1.0).abs() < 1e-15, "sigma({x}) complement off: {s}");
            x += 0.37;
        }
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-30.0) < 1e-13);
        assert!(sigmoid(30.0) > 1.0 - 1e-13);
    }

    #[test]
    fn sigmoid_prime_peaks_at_origin() {
        assert_eq!(sigmoid_prime(0.0), 0.25);
        assert!(sigmoid_prime(5.0) < sigmoid_prime(1.0));
        assert!(sigmoid_prime(-30.0) < 1e-12);
        // Matches a central difference of sigmoid itself.
        let d = central_difference(|x| Ok(sigmoid(x)), 0.7, 1e-6).unwrap();
        assert!((d - sigmoid_prime(0.7)).abs() < 1e-9);
    }

    #[test]
    fn central_difference_recovers_quadratic_slope_exactly() {
        let d = central_difference(|x| Ok(3.0 * x * x + 2.0 * x - 5.0), 1.5, 1e-4).unwrap();
        assert!((d - 11.0).abs() < 1e-9);
        assert!(central_difference(|x| Ok(x), 0.0, 0.0).is_err());
        assert!(central_difference(|_| Ok(f64::NAN), 0.0, 1e-3).is_err());
    }
}
