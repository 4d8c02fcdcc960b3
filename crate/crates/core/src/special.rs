//! Special functions used by the heat-kernel oracles.

use libm::{erf, erfc, lgamma as ln_gamma, tgamma as gamma};
use std::f64::consts::PI;

/// Surface area of the unit sphere in `R^d`.
pub fn sphere_area(d: usize) -> f64 {
    2.0 * PI.powf(d as f64 / 2.0) / gamma(d as f64 / 2.0)
}

/// Volume of the unit ball in `R^d`.
pub fn ball_volume(d: usize) -> f64 {
    sphere_area(d) / d as f64
}

fn is_half_integer(a: f64) -> bool {
    let t = 2.0 * a;
    t == t.round() && t.round() as i64 % 2 != 0
}

fn is_integer(a: f64) -> bool {
    a == a.round()
}

/// Power series for the regularized lower incomplete gamma function.
fn p_series(a: f64, y: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut k = a;
    for _ in 0..500 {
        k += 1.0;
        term *= y / k;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    (a * y.ln() - y - ln_gamma(a)).exp() * sum
}

/// Lentz continued fraction for the regularized upper incomplete gamma.
fn q_fraction(a: f64, y: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = y + 1.0 - a;
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
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (a * y.ln() - y - ln_gamma(a)).exp() * h
}

/// Regularized upper incomplete gamma by upward recursion from `a0 ∈ {1/2, 1}`.
/// Only used for `y ≥ 1`, where the recursion adds positive terms.
fn q_closed(a: f64, y: f64) -> f64 {
    // term = y^s e^{-y} / Γ(s+1)
    let (mut s, mut q, mut term) = if is_half_integer(a) {
        let sy = y.sqrt();
        (0.5, erfc(sy), 2.0 * sy * (-y).exp() / PI.sqrt())
    } else {
        (1.0, (-y).exp(), y * (-y).exp())
    };
    while s < a - 0.25 {
        q += term;
        s += 1.0;
        term *= y / s;
    }
    q
}

/// Regularized lower incomplete gamma `P(a, y)`.
///
/// Integer and half-integer `a` (the only values arising from `d/2 + j`)
/// take a short recursion from `erfc` or `exp`; other values fall back to
/// the series / continued-fraction pair.
pub fn gamma_p(a: f64, y: f64) -> f64 {
    if y <= 0.0 {
        return 0.0;
    }
    if y < a + 1.0 && (y < 1.0 || a > 30.0 || !(is_integer(a) || is_half_integer(a))) {
        return p_series(a, y).min(1.0);
    }
    if a <= 30.0 && y >= 1.0 && (is_integer(a) || is_half_integer(a)) {
        return 1.0 - q_closed(a, y);
    }
    if y < a + 1.0 {
        p_series(a, y).min(1.0)
    } else {
        1.0 - q_fraction(a, y)
    }
}

/// Regularized upper incomplete gamma `Q(a, y) = 1 - P(a, y)`, computed
/// without cancellation in the upper tail.
pub fn gamma_q(a: f64, y: f64) -> f64 {
    if y <= 0.0 {
        return 1.0;
    }
    if y < a + 1.0 {
        return 1.0 - p_series(a, y).min(1.0);
    }
    if a <= 30.0 && (is_integer(a) || is_half_integer(a)) {
        q_closed(a, y)
    } else {
        q_fraction(a, y)
    }
}

/// Unregularized lower incomplete gamma `γ(a, y)`.
pub fn gamma_lower(a: f64, y: f64) -> f64 {
    gamma_p(a, y) * gamma(a)
}

/// `v^{-a} γ(a, v)`, finite and smooth down to `v = 0` where it equals `1/a`.
pub fn gamma_lower_scaled(a: f64, v: f64) -> f64 {
    if v <= 0.0 {
        return 1.0 / a;
    }
    if v < 1.0 {
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = a;
        for _ in 0..200 {
            k += 1.0;
            term *= v / k;
            sum += term;
            if term < sum * 1e-17 {
                break;
            }
        }
        return (-v).exp() * sum / a;
    }
    gamma_p(a, v) * gamma(a) * v.powf(-a)
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// `P(|a + Z| ≤ b)` type interval probability `P(lo ≤ Z ≤ hi)` for a
/// standard normal, accurate in both tails.
pub fn normal_interval(lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        return 0.0;
    }
    let s = std::f64::consts::SQRT_2;
    if lo >= 0.0 {
        0.5 * (erfc(lo / s) - erfc(hi / s))
    } else if hi <= 0.0 {
        0.5 * (erfc(-hi / s) - erfc(-lo / s))
    } else {
        0.5 * (erf(hi / s) - erf(lo / s))
    }
}

/// CDF of the noncentral chi-square law with `k` degrees of freedom and
/// noncentrality `lambda`, i.e. `P(|μ + Z|² ≤ x)` for `Z` standard normal in
/// `R^k` and `|μ|² = lambda`.
pub fn noncentral_chi2_cdf(x: f64, k: usize, lambda: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let a = k as f64 / 2.0;
    let y = x / 2.0;
    let m = lambda / 2.0;
    if m < 1e-300 {
        return gamma_p(a, y);
    }
    // Poisson(m) mixture of central laws with k + 2j degrees of freedom.
    let spread = 12.0 * m.sqrt() + 20.0;
    let j_lo = (m - spread).max(0.0).floor() as usize;
    let j_hi = (m + spread).ceil() as usize;
    let ln_m = m.ln();
    // Downward recursion P(a+j) = P(a+j+1) + y^{a+j} e^{-y} / Γ(a+j+1) is stable.
    let mut p = gamma_p(a + j_hi as f64, y);
    let mut ln_term = (a + j_hi as f64 - 1.0) * y.ln() - y - ln_gamma(a + j_hi as f64);
    let mut sum = 0.0;
    let mut j = j_hi;
    loop {
        let w = (-m + j as f64 * ln_m - ln_gamma(j as f64 + 1.0)).exp();
        sum += w * p;
        if j == j_lo {
            break;
        }
        j -= 1;
        p = (p + ln_term.exp()).min(1.0);
        ln_term -= y.ln();
        ln_term += (a + j as f64).ln();
    }
    sum.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_p(a: f64, y: f64) -> f64 {
        // t = u² removes the endpoint singularity for a ≥ 1/2.
        let c = crate::quadrature::QuadConfig::with_rel_tol(1e-14);
        crate::quadrature::integrate(|u| 2.0 * u.powf(2.0 * a - 1.0) * (-u * u).exp(), 0.0, y.sqrt(), &c)
            / gamma(a)
    }

    #[test]
    fn gamma_p_matches_reference() {
        for &a in &[0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 5.5, 0.7, 12.0] {
            for &y in &[1e-6, 0.01, 0.3, 0.99, 1.0, 2.0, 5.0, 20.0, 60.0] {
                let r = reference_p(a, y);
                let v = gamma_p(a, y);
                assert!((v - r).abs() <= 1e-14 + 1e-12 * r, "a={a} y={y} {v} {r}");
                let q = gamma_q(a, y);
                assert!((q - (1.0 - r)).abs() <= 1e-14 + 1e-10 * (1.0 - r), "q a={a} y={y}");
            }
        }
        let y = 1.0f64;
        let closed = erf(1.0) - 2.0 * (y / PI).sqrt() * (-y).exp();
        assert!((gamma_p(1.5, 1.0) - closed).abs() < 1e-15);
    }

    #[test]
    fn scaled_lower_gamma_is_continuous() {
        for &a in &[0.5, 1.0, 1.5] {
            let below = gamma_lower_scaled(a, 1.0 - 1e-12);
            let above = gamma_lower_scaled(a, 1.0 + 1e-12);
            assert!((below - above).abs() < 1e-10);
            assert!((gamma_lower_scaled(a, 1e-14) - 1.0 / a).abs() < 1e-12);
        }
    }

    #[test]
    fn chi2_central_and_shifted() {
        // central, k=2: 1 - exp(-x/2)
        assert!((noncentral_chi2_cdf(3.0, 2, 0.0) - (1.0 - (-1.5f64).exp())).abs() < 1e-14);
        // k=1 shifted by mu: P(-r <= mu+Z <= r)
        let (mu, r) = (1.3f64, 0.8f64);
        let want = normal_interval(-r - mu, r - mu);
        let got = noncentral_chi2_cdf(r * r, 1, mu * mu);
        assert!((got - want).abs() < 1e-12, "{got} {want}");
        // far point in d=3 stays finite and tiny
        let far = noncentral_chi2_cdf(1.0, 3, 400.0);
        assert!(far >= 0.0 && far < 1e-30);
    }

    #[test]
    fn sphere_constants() {
        assert!((sphere_area(3) - 4.0 * PI).abs() < 1e-12);
        assert!((ball_volume(3) - 4.0 / 3.0 * PI).abs() < 1e-12);
    }
}
