//! Chi-squared CDF and quantile via the regularized incomplete gamma
//! function.
//!
//! The quantile is obtained by numerical inversion: a Wilson-Hilferty
//! starting point refined by Newton steps on the CDF, with a bisection
//! safeguard. Converges well past the 1e-6 relative accuracy the gating
//! code needs.

use crate::error::{Error, Result};

/// Lanczos approximation (g = 7, 9 coefficients) of ln Gamma(x) for x > 0.
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    // Reflection is unnecessary: callers pass x = dof/2 >= 0.5.
    let z = x - 1.0;
    let mut acc = 0.99999999999980993;
    for (i, c) in COEFFS.iter().enumerate() {
        acc += c / (z + (i + 1) as f64);
    }
    let t = z + 7.5;
    0.5 * (2.0 * core::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized lower incomplete gamma P(a, x), a > 0, x >= 0.
///
/// Series expansion for x < a + 1, continued fraction for the complement
/// otherwise; both iterated to double-precision convergence.
fn gamma_p(a: f64, x: f64) -> f64 {
    debug_assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        // P(a,x) = x^a e^-x / Gamma(a) * sum_{n>=0} x^n / (a (a+1) ... (a+n)).
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut denom = a;
        for _ in 0..500 {
            denom += 1.0;
            term *= x / denom;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        sum * log_prefix.exp()
    } else {
        // Q(a,x) via Lentz's method on the standard continued fraction.
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        1.0 - log_prefix.exp() * h
    }
}

/// CDF of the chi-squared distribution with `dof` degrees of freedom.
pub fn chi2_cdf(x: f64, dof: u32) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    gamma_p(dof as f64 / 2.0, x / 2.0)
}

/// Quantile (inverse CDF) of the chi-squared distribution.
///
/// `p` must lie strictly inside (0, 1); `dof >= 1`.
pub fn chi2_quantile(p: f64, dof: u32) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::ChiSquaredDomain { p });
    }
    let k = dof as f64;

    // Wilson-Hilferty starting point.
    let z = standard_normal_quantile(p);
    let wh = 1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt();
    let mut x = (k * wh * wh * wh).max(1e-12);

    // Bracket the root, then refine with safeguarded Newton.
    let (mut lo, mut hi) = (0.0f64, x.max(k) * 2.0 + 10.0);
    while chi2_cdf(hi, dof) < p {
        hi *= 2.0;
    }
    if !(x > lo && x < hi) {
        x = 0.5 * (lo + hi);
    }
    for _ in 0..200 {
        let f = chi2_cdf(x, dof) - p;
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        // Chi-squared density at x.
        let ln_pdf = (k / 2.0 - 1.0) * x.ln() - x / 2.0 - (k / 2.0) * core::f64::consts::LN_2
            - ln_gamma(k / 2.0);
        let pdf = ln_pdf.exp();
        let mut next = if pdf > 0.0 { x - f / pdf } else { 0.5 * (lo + hi) };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        // Relative stop: quantiles span many orders of magnitude (p = 1e-6
        // at one degree of freedom sits near 1e-12).
        if (next - x).abs() <= 1e-15 * next.abs() {
            x = next;
            break;
        }
        x = next;
    }
    Ok(x)
}

/// Acklam-style rational approximation of the standard normal quantile,
/// only used to seed the chi-squared Newton iteration.
fn standard_normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -standard_normal_quantile(1.0 - p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cdf_and_quantile_are_mutually_inverse() {
        for dof in [1u32, 2, 3, 6, 10, 30] {
            for &p in &[1e-6, 0.01, 0.1, 0.5, 0.9, 0.95, 0.99, 1.0 - 1e-9] {
                let x = chi2_quantile(p, dof).unwrap();
                assert_relative_eq!(chi2_cdf(x, dof), p, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn quantile_matches_table_values_for_six_dof() {
        // Classical table entries at four decimals.
        let cases = [(0.01, 0.8721), (0.5, 5.3481), (0.95, 12.5916)];
        for (p, table) in cases {
            let x = chi2_quantile(p, 6).unwrap();
            assert_relative_eq!((x * 1e4).round() / 1e4, table, epsilon = 1e-12);
        }
    }

    #[test]
    fn quantile_agrees_with_closed_form_six_dof_cdf() {
        // Independent oracle: for dof = 6 the CDF has the closed form
        // 1 - e^{-x/2} (1 + x/2 + x^2/8).
        let closed_form = |x: f64| 1.0 - (-x / 2.0).exp() * (1.0 + x / 2.0 + x * x / 8.0);
        for &p in &[0.01, 0.1, 0.25, 0.5, 0.75, 0.95, 0.99] {
            let x = chi2_quantile(p, 6).unwrap();
            assert_relative_eq!(closed_form(x), p, max_relative = 1e-9);
        }
    }

    #[test]
    fn quantile_is_monotone_in_p_and_dof() {
        for dof in [2u32, 6, 12] {
            let mut last = 0.0;
            for i in 1..100 {
                let p = i as f64 / 100.0;
                let x = chi2_quantile(p, dof).unwrap();
                assert!(x > last);
                last = x;
            }
        }
        assert!(chi2_quantile(0.5, 7).unwrap() > chi2_quantile(0.5, 6).unwrap());
    }

    #[test]
    fn quantile_rejects_probabilities_outside_open_interval() {
        for p in [0.0, 1.0, -0.3, 1.7, f64::NAN] {
            assert!(matches!(
                chi2_quantile(p, 6),
                Err(Error::ChiSquaredDomain { .. })
            ));
        }
    }
}
