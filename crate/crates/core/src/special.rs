//! Bessel functions of order zero and one, the Hankel function `H₀⁽¹⁾`, and
//! the free-space Green's function of the 2-D Helmholtz operator.
//!
//! Below [`SERIES_LIMIT`] the ascending power series are summed directly;
//! above it the Hankel asymptotic expansion is truncated at its smallest term.
//! At the split the largest series term is about `2e4` and the smallest
//! asymptotic term about `1e-11`, so both branches stay well inside `1e-10`
//! absolute error on `(0, 100]`.

use std::f64::consts::{FRAC_2_PI, PI};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::geometry::Point;

pub type Complex = Complex64;

/// Euler–Mascheroni constant.
const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Arguments below this use the power series.
pub const SERIES_LIMIT: f64 = 12.0;

const SERIES_TOL: f64 = 1e-17;

fn check_finite(function: &'static str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain {
            function,
            value: x,
            reason: "argument must be finite",
        })
    }
}

fn check_positive(function: &'static str, x: f64) -> Result<()> {
    check_finite(function, x)?;
    if x > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain {
            function,
            value: x,
            reason: "argument must be positive",
        })
    }
}

/// `J0` and the regular part of the `Y0` series, sharing the terms.
fn series_order0(x: f64) -> (f64, f64) {
    let t = 0.25 * x * x;
    let mut term: f64 = 1.0;
    let mut j0: f64 = 1.0;
    let mut harmonic = 0.0;
    let mut tail = 0.0;
    let mut k = 1.0;
    loop {
        term *= -t / (k * k);
        harmonic += 1.0 / k;
        j0 += term;
        tail -= harmonic * term;
        if term.abs() * harmonic.max(1.0) < SERIES_TOL * j0.abs().max(1.0) && k > t.sqrt() {
            break;
        }
        k += 1.0;
    }
    let y0 = FRAC_2_PI * (((0.5 * x).ln() + EULER_GAMMA) * j0 + tail);
    (j0, y0)
}

fn series_order1(x: f64) -> (f64, f64) {
    let t = 0.25 * x * x;
    // term_k = (-t)^k / (k! (k+1)!)
    let mut term: f64 = 1.0;
    let mut sum_j = 1.0;
    // psi(k+1) + psi(k+2) with psi(n+1) = H_n - gamma
    let mut h_k = 0.0;
    let mut h_k1 = 1.0;
    let mut sum_y = (h_k + h_k1 - 2.0 * EULER_GAMMA) * term;
    let mut k = 1.0;
    loop {
        term *= -t / (k * (k + 1.0));
        h_k += 1.0 / k;
        h_k1 += 1.0 / (k + 1.0);
        sum_j += term;
        sum_y += (h_k + h_k1 - 2.0 * EULER_GAMMA) * term;
        if term.abs() * h_k1 < SERIES_TOL && k > t.sqrt() {
            break;
        }
        k += 1.0;
    }
    let j1 = 0.5 * x * sum_j;
    let y1 = -FRAC_2_PI / x + FRAC_2_PI * (0.5 * x).ln() * j1 - 0.5 * x * sum_y / PI;
    (j1, y1)
}

/// Hankel asymptotic expansion for order `nu`, returning `(J, Y)`.
fn asymptotic(nu: f64, x: f64) -> (f64, f64) {
    let mu = 4.0 * nu * nu;
    let mut p = 1.0;
    let mut q = 0.0;
    let mut term: f64 = 1.0;
    let mut m: f64 = 1.0;
    loop {
        let next = term * (mu - (2.0 * m - 1.0).powi(2)) / (8.0 * m * x);
        if next.abs() >= term.abs() || next.abs() < SERIES_TOL {
            break;
        }
        term = next;
        // i^m pattern: m odd feeds Q, m even feeds P, with alternating signs
        match (m as u64) % 4 {
            1 => q += term,
            2 => p -= term,
            3 => q -= term,
            _ => p += term,
        }
        m += 1.0;
    }
    let chi = x - (0.5 * nu + 0.25) * PI;
    let amp = (FRAC_2_PI / x).sqrt();
    let (s, c) = chi.sin_cos();
    (amp * (p * c - q * s), amp * (p * s + q * c))
}

fn j0_y0_unchecked(x: f64) -> (f64, f64) {
    if x < SERIES_LIMIT {
        series_order0(x)
    } else {
        asymptotic(0.0, x)
    }
}

/// Bessel function of the first kind, order zero.
pub fn bessel_j0(x: f64) -> Result<f64> {
    check_finite("bessel_j0", x)?;
    let x = x.abs();
    if x < SERIES_LIMIT {
        let t = 0.25 * x * x;
        let mut term: f64 = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        while term.abs() >= SERIES_TOL || k <= t.sqrt() {
            term *= -t / (k * k);
            sum += term;
            k += 1.0;
        }
        Ok(sum)
    } else {
        Ok(asymptotic(0.0, x).0)
    }
}

/// Bessel function of the second kind, order zero. Requires `x > 0`.
pub fn bessel_y0(x: f64) -> Result<f64> {
    check_positive("bessel_y0", x)?;
    Ok(j0_y0_unchecked(x).1)
}

/// Bessel function of the first kind, order one.
pub fn bessel_j1(x: f64) -> Result<f64> {
    check_finite("bessel_j1", x)?;
    let a = x.abs();
    let v = if a < SERIES_LIMIT {
        series_order1(a).0
    } else {
        asymptotic(1.0, a).0
    };
    // odd function
    Ok(if x < 0.0 { -v } else { v })
}

/// Bessel function of the second kind, order one. Requires `x > 0`.
pub fn bessel_y1(x: f64) -> Result<f64> {
    check_positive("bessel_y1", x)?;
    Ok(if x < SERIES_LIMIT {
        series_order1(x).1
    } else {
        asymptotic(1.0, x).1
    })
}

/// `H₀⁽¹⁾(x) = J₀(x) + i Y₀(x)` for `x > 0`.
pub fn hankel1_0(x: f64) -> Result<Complex> {
    check_positive("hankel1_0", x)?;
    let (j, y) = j0_y0_unchecked(x);
    Ok(Complex::new(j, y))
}

/// Green's function `-(i/4) H₀⁽¹⁾(κ r)` as a function of the distance `r`.
pub fn greens_at_distance(r: f64, kappa: f64) -> Result<Complex> {
    if !(kappa.is_finite() && kappa > 0.0) {
        return Err(Error::Domain {
            function: "greens",
            value: kappa,
            reason: "wavenumber must be positive",
        });
    }
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::Domain {
            function: "greens",
            value: r,
            reason: "source and observation points coincide",
        });
    }
    let (j, y) = j0_y0_unchecked(kappa * r);
    Ok(Complex::new(0.25 * y, -0.25 * j))
}

/// Free-space Green's function of `Δ + κ²` between two points.
pub fn greens(x: Point, y: Point, kappa: f64) -> Result<Complex> {
    greens_at_distance((x[0] - y[0]).hypot(x[1] - y[1]), kappa)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use num_bigint::BigInt;
    use num_traits::{One, Signed, ToPrimitive, Zero};
    use proptest::prelude::*;

    const FRACTION_BITS: u64 = 400;

    fn to_f64(v: &BigInt) -> f64 {
        // keep 60 significant bits, then scale in floating point
        let shift = v.bits().saturating_sub(60);
        let head = (v >> shift).to_f64().unwrap();
        head * 2f64.powi(shift as i32 - FRACTION_BITS as i32)
    }

    /// Exact-rational `x²/4` as `num / 2^den_bits`, then the `J0` series and the
    /// harmonic tail of `Y0` summed in 400-bit fixed point.
    fn oracle_order0(x: f64) -> (f64, f64) {
        let scale = BigInt::one() << FRACTION_BITS;
        let bits = x.to_bits();
        let exp = ((bits >> 52) & 0x7ff) as i64 - 1075;
        let mant = (bits & ((1u64 << 52) - 1)) | (1u64 << 52);
        // t = mant² · 2^(2 exp - 2)
        let t_num = BigInt::from(mant) * BigInt::from(mant);
        let t_exp = 2 * exp - 2;
        let mul_t = |v: &BigInt| -> BigInt {
            let p = v * &t_num;
            if t_exp >= 0 {
                p << t_exp as u64
            } else {
                p >> (-t_exp) as u64
            }
        };
        let mut term = scale.clone();
        let mut j0 = scale.clone();
        let mut tail = BigInt::zero();
        let mut harmonic = BigInt::zero();
        let mut k = 1u64;
        loop {
            term = -mul_t(&term) / BigInt::from(k * k);
            harmonic += &scale / BigInt::from(k);
            j0 += &term;
            tail -= (&harmonic * &term) >> FRACTION_BITS;
            if term.is_zero() || (term.abs().bits() + 8 < FRACTION_BITS - 200 && k > 4) {
                break;
            }
            k += 1;
        }
        let j = to_f64(&j0);
        let y = FRAC_2_PI * (((0.5 * x).ln() + EULER_GAMMA) * j + to_f64(&tail));
        (j, y)
    }

    #[test]
    fn oracle_reproduces_frozen_values() {
        let (j, y) = oracle_order0(1.0);
        assert_abs_diff_eq!(j, 0.765_197_686_557_966_6, epsilon = 1e-15);
        assert_abs_diff_eq!(y, 0.088_256_964_215_676_96, epsilon = 1e-15);
    }

    #[test]
    fn listed_values() {
        assert_abs_diff_eq!(bessel_j0(1.0).unwrap(), 0.765_197_686_6, epsilon = 1e-10);
        assert_abs_diff_eq!(bessel_y0(1.0).unwrap(), 0.088_256_964_2, epsilon = 1e-10);
        assert_abs_diff_eq!(bessel_j0(2.404_825_557_7).unwrap(), 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(bessel_y0(0.893_576_966_3).unwrap(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn agrees_with_oracle_on_series_branch() {
        for i in 1..=240 {
            let x = 0.05 * i as f64;
            let (j, y) = oracle_order0(x);
            // cancellation in the alternating sum grows toward the split
            let tol = if x < 6.0 { 1e-14 } else { 1e-11 };
            assert_abs_diff_eq!(bessel_j0(x).unwrap(), j, epsilon = tol);
            assert_abs_diff_eq!(bessel_y0(x).unwrap(), y, epsilon = tol);
        }
    }

    #[test]
    fn asymptotic_branch_matches_oracle_past_split() {
        // the fixed-point series stays exact well past the floating-point split
        for &x in &[12.0, 12.01, 15.5, 20.0, 27.3, 35.0] {
            let (j, y) = oracle_order0(x);
            assert_abs_diff_eq!(bessel_j0(x).unwrap(), j, epsilon = 1e-10);
            assert_abs_diff_eq!(bessel_y0(x).unwrap(), y, epsilon = 1e-10);
        }
    }

    #[test]
    fn large_argument_values() {
        assert_abs_diff_eq!(bessel_j0(50.0).unwrap(), 0.055_812_327_669_251_82, epsilon = 1e-12);
        assert_abs_diff_eq!(bessel_y0(50.0).unwrap(), -0.098_064_995_470_077_08, epsilon = 1e-12);
        assert_abs_diff_eq!(bessel_j0(99.9).unwrap(), 0.012_180_433_516_928_98, epsilon = 1e-12);
        assert_abs_diff_eq!(bessel_y0(99.9).unwrap(), -0.078_893_139_943_319_8, epsilon = 1e-12);
    }

    #[test]
    fn order_one_values() {
        let cases = [
            (0.5, 0.242_268_457_674_873_9, -1.471_472_392_670_243),
            (1.0, 0.440_050_585_744_933_5, -0.781_212_821_300_288_7),
            (7.9, 0.219_179_399_921_751_2, -0.181_721_077_280_573_1),
            (11.99, -0.224_099_371_266_248_6, -0.054_890_709_260_874_95),
            (20.0, 0.066_833_124_175_850_05, -0.165_511_614_362_521_3),
            (50.0, -0.097_511_828_125_175_14, -0.056_795_668_562_014_77),
        ];
        for (x, j1, y1) in cases {
            assert_abs_diff_eq!(bessel_j1(x).unwrap(), j1, epsilon = 1e-12);
            assert_abs_diff_eq!(bessel_y1(x).unwrap(), y1, epsilon = 1e-12);
            assert_abs_diff_eq!(bessel_j1(-x).unwrap(), -j1, epsilon = 1e-12);
        }
    }

    #[test]
    fn small_argument_y0() {
        assert_abs_diff_eq!(bessel_y0(1e-6).unwrap(), -8.869_031_481_659_444, epsilon = 1e-12);
        assert_abs_diff_eq!(bessel_j0(1e-6).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn wronskian_holds() {
        // J1 Y0 - J0 Y1 = 2 / (pi x)
        let mut x: f64 = 0.1;
        while x <= 50.0 {
            let w = bessel_j1(x).unwrap() * bessel_y0(x).unwrap() - bessel_j0(x).unwrap() * bessel_y1(x).unwrap();
            assert!((w * PI * x / 2.0 - 1.0).abs() < 1e-9, "wronskian off at x = {x}: {w}");
            x += 0.037;
        }
    }

    #[test]
    fn greens_at_unit_distance() {
        let g = greens([0.0, 0.0], [1.0, 0.0], PI).unwrap();
        assert_abs_diff_eq!(g.re, 0.328_366_308_516_312_7 / 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.im, 0.304_242_177_644_093_9 / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn domain_errors() {
        assert!(bessel_j0(f64::NAN).is_err());
        assert!(bessel_j0(f64::INFINITY).is_err());
        assert!(bessel_y0(0.0).is_err());
        assert!(bessel_y0(-1.0).is_err());
        assert!(hankel1_0(0.0).is_err());
        assert!(greens([0.0, 0.0], [0.0, 0.0], 1.0).is_err());
        assert!(greens([0.0, 0.0], [1.0, 0.0], 0.0).is_err());
        assert_eq!(bessel_j0(-3.0).unwrap(), bessel_j0(3.0).unwrap());
    }

    proptest! {
        #[test]
        fn greens_depends_only_on_distance(
            x in prop::array::uniform2(-2.0f64..2.0),
            shift in prop::array::uniform2(-2.0f64..2.0),
            theta in 0.0f64..(2.0 * PI),
            kappa in 0.5f64..15.0,
        ) {
            let y = [x[0] + 0.3 + shift[0].abs(), x[1] + shift[1]];
            let g = greens(x, y, kappa).unwrap();
            let (s, c) = theta.sin_cos();
            let rot = |p: Point| [c * p[0] - s * p[1], s * p[0] + c * p[1]];
            let g_rot = greens(rot(x), rot(y), kappa).unwrap();
            let g_swap = greens(y, x, kappa).unwrap();
            prop_assert!((g - g_rot).norm() < 1e-11);
            prop_assert_eq!(g, g_swap);
        }
    }
}
