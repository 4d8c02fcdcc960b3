//! Bounding functions `Q̃`, `I_t`, `J_t` and empirical ratio checks between
//! them and the second moment dual.

use super::feynman_kac::{dual_v_with, PathConfig};
use super::heat::Potential;
use crate::error::{Error, Result};
use crate::kernels::CorrelationKernel;
use crate::quadrature::{integrate, integrate_to_infinity, QuadConfig};
use crate::special::{gamma_q, noncentral_chi2_cdf};
use crate::testfn::TestFunction;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Hölder exponent `p`, support radius `K`, dimension and kernel decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundFns {
    pub p: f64,
    pub k: f64,
    pub d: usize,
    pub alpha: f64,
}

impl BoundFns {
    pub fn new(p: f64, k: f64, d: usize, alpha: f64) -> Result<Self> {
        if !(p > 1.0 && p < 10.0 / 9.0) {
            return Err(Error::param("p", format!("must lie in (1, 10/9), got {p}")));
        }
        if !(k > 0.0) {
            return Err(Error::param("K", "support radius must be positive"));
        }
        if d < 3 {
            return Err(Error::param("d", format!("must be >= 3, got {d}")));
        }
        Ok(Self { p, k, d, alpha })
    }

    /// Conjugate exponent.
    pub fn q(&self) -> f64 {
        self.p / (self.p - 1.0)
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_dim(x: &[f64], bf: &BoundFns) -> Result<()> {
    if x.len() != bf.d {
        return Err(Error::param("x", format!("expected {} coordinates, got {}", bf.d, x.len())));
    }
    Ok(())
}

/// `Q̃(t, x) = ∫_0^t P(|x + B_s| ≤ K)^{1/p} ds`.
pub fn bound_qtilde(t: f64, x: &[f64], bf: &BoundFns) -> Result<f64> {
    check_dim(x, bf)?;
    if t <= 0.0 {
        return Ok(0.0);
    }
    let r = norm(x);
    let cfg = QuadConfig::with_rel_tol(1e-8);
    let inv_p = 1.0 / bf.p;
    let f = |s: f64| {
        if s <= 0.0 {
            return if r <= bf.k { 1.0 } else { 0.0 };
        }
        noncentral_chi2_cdf(bf.k * bf.k / s, bf.d, r * r / s).powf(inv_p)
    };
    // The integrand switches on around s ≈ (|x| - K)² / d.
    let knee = ((r - bf.k).max(0.0).powi(2) / bf.d as f64).min(t);
    let mut knots = vec![0.0];
    if knee > 0.0 && knee < t {
        knots.push(knee);
    }
    knots.push(t);
    Ok(crate::quadrature::integrate_pieces(f, &knots, &cfg))
}

/// `I_t(x) = 1 ∧ ∫_0^t s^{d/2 - d/2p} p_{8s}(x) ds`, in closed form through
/// the upper incomplete gamma function.
pub fn bound_i(t: f64, x: &[f64], bf: &BoundFns) -> Result<f64> {
    check_dim(x, bf)?;
    if t <= 0.0 {
        return Ok(0.0);
    }
    let d = bf.d as f64;
    let b = d / (2.0 * bf.p);
    if b <= 1.0 {
        return Err(Error::Divergent(format!("I_t needs d > 2p, got d={d}, p={}", bf.p)));
    }
    let c = norm(x).powi(2) / 16.0;
    if c == 0.0 {
        return Ok(1.0);
    }
    let a = b - 1.0;
    let v = (16.0 * PI).powf(-d / 2.0) * c.powf(-a) * libm::tgamma(a) * gamma_q(a, c / t);
    Ok(v.min(1.0))
}

/// `J_t(x) = ∫_0^t (E[|x + B_s|^{4p-2d} ∧ 1])^{1/p} ds`, for `d ≥ 5`.
pub fn bound_j(t: f64, x: &[f64], bf: &BoundFns) -> Result<f64> {
    check_dim(x, bf)?;
    if bf.d < 5 {
        return Err(Error::Divergent(format!("J_t is only defined here for d >= 5, got {}", bf.d)));
    }
    if t <= 0.0 {
        return Ok(0.0);
    }
    let r = norm(x);
    let beta = 2.0 * bf.d as f64 - 4.0 * bf.p;
    let inner_cfg = QuadConfig::with_rel_tol(1e-8);
    let inv_p = 1.0 / bf.p;
    let d = bf.d;
    // E[R^{-β} ∧ 1] = β ∫_1^∞ r^{-β-1} P(R ≤ r) dr, with r = e^u.
    let inner = |s: f64| {
        if s <= 0.0 {
            return r.max(1.0).powf(-beta);
        }
        let lam = r * r / s;
        beta * integrate_to_infinity(
            |u| (-beta * u).exp() * noncentral_chi2_cdf((2.0 * u).exp() / s, d, lam),
            0.0,
            &inner_cfg,
        )
    };
    let cfg = QuadConfig::with_rel_tol(1e-6);
    Ok(integrate(|s| inner(s).powf(inv_p), 0.0, t, &cfg))
}

/// One sampled ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioEntry {
    pub t: f64,
    pub x_norm: f64,
    pub y_norm: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub ratio: f64,
}

/// Empirical ratio between the two sides of one inequality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub name: String,
    pub entries: Vec<RatioEntry>,
    pub sup: f64,
    pub argmax: usize,
    /// Largest-`t` sup over the sup at the previous sampled `t`.
    pub growth: f64,
    pub finite: bool,
    pub stable: bool,
}

impl RatioReport {
    fn from_entries(name: &str, entries: Vec<RatioEntry>, growth_tol: f64) -> Self {
        let finite = entries.iter().all(|e| e.ratio.is_finite());
        let (argmax, sup) = entries
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, e)| if e.ratio > acc.1 { (i, e.ratio) } else { acc });
        let mut ts: Vec<f64> = entries.iter().map(|e| e.t).collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        let slice_sup = |t: f64| {
            entries
                .iter()
                .filter(|e| e.t == t)
                .map(|e| e.ratio)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let growth = match ts.len() {
            0 | 1 => 1.0,
            n => slice_sup(ts[n - 1]) / slice_sup(ts[n - 2]),
        };
        Self {
            name: name.to_string(),
            entries,
            sup,
            argmax,
            growth,
            finite,
            stable: finite && growth <= growth_tol,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// `V^{φφ}_t(x,y) / (Q̃(t,x) Q̃(t,y))`.
    pub second_moment: RatioReport,
    /// `Q̃(t,x) / I_t(x)`.
    pub qtilde_vs_i: RatioReport,
    /// `J_t(x) / I_t(x)`; only for `d ≥ 5`.
    pub j_vs_i: Option<RatioReport>,
}

/// Options for [`bound_checks`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOptions {
    pub paths: PathConfig,
    /// Maximum tolerated growth of the sup ratio between the last two times.
    pub growth_tol: f64,
}

/// Evaluates the three ratio checks on `(t, x, y)` samples.
pub fn bound_checks(
    kernel: &CorrelationKernel,
    phi: &TestFunction,
    bf: &BoundFns,
    samples: &[(f64, Vec<f64>, Vec<f64>)],
    opts: &CheckOptions,
) -> Result<BoundReport> {
    if phi.center.iter().any(|&c| c != 0.0) || (phi.radius - bf.k).abs() > 1e-12 {
        return Err(Error::param("phi", "must be centered at the origin with radius K"));
    }
    let t_max = samples.iter().map(|s| s.0).fold(0.0, f64::max);
    if !(t_max > 0.0) {
        return Err(Error::param("samples", "need at least one positive time"));
    }
    let pot = Potential::new(phi, t_max);
    let mut second = Vec::new();
    let mut qi = Vec::new();
    let mut ji = Vec::new();
    for (t, x, y) in samples {
        let qx = bound_qtilde(*t, x, bf)?;
        let qy = bound_qtilde(*t, y, bf)?;
        let num = if kernel.is_zero() {
            pot.eval(*t, x) * pot.eval(*t, y)
        } else {
            dual_v_with(&pot, &pot, *t, x, y, kernel, &opts.paths).mean
        };
        let entry = |num: f64, den: f64| RatioEntry {
            t: *t,
            x_norm: norm(x),
            y_norm: norm(y),
            numerator: num,
            denominator: den,
            ratio: num / den,
        };
        second.push(entry(num, qx * qy));
        let ix = bound_i(*t, x, bf)?;
        qi.push(entry(qx, ix));
        if bf.d >= 5 {
            ji.push(entry(bound_j(*t, x, bf)?, ix));
        }
    }
    Ok(BoundReport {
        second_moment: RatioReport::from_entries("second_moment", second, opts.growth_tol),
        qtilde_vs_i: RatioReport::from_entries("qtilde_vs_i", qi, opts.growth_tol),
        j_vs_i: (bf.d >= 5).then(|| RatioReport::from_entries("j_vs_i", ji, opts.growth_tol)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bf(d: usize) -> BoundFns {
        BoundFns::new(1.05, 1.0, d, 3.0).unwrap()
    }

    #[test]
    fn qtilde_vanishes_at_zero_time_and_is_below_t() {
        let b = bf(3);
        assert_eq!(bound_qtilde(0.0, &[0.5, 0.0, 0.0], &b).unwrap(), 0.0);
        let v = bound_qtilde(2.0, &[0.0; 3], &b).unwrap();
        assert!(v > 0.0 && v < 2.0);
    }

    #[test]
    fn bound_i_matches_time_quadrature() {
        let b = bf(3);
        let x = [4.0, 0.0, 0.0];
        let d = 3.0;
        let e = d / 2.0 - d / (2.0 * b.p);
        let direct = integrate(
            |s: f64| {
                if s <= 0.0 {
                    0.0
                } else {
                    s.powf(e) * (16.0 * PI * s).powf(-d / 2.0) * (-16.0 / (16.0 * s)).exp()
                }
            },
            0.0,
            5.0,
            &QuadConfig::with_rel_tol(1e-10),
        );
        let v = bound_i(5.0, &x, &b).unwrap();
        assert!((v - direct.min(1.0)).abs() < 1e-8 * direct.max(1e-3), "{v} {direct}");
        assert_eq!(bound_i(5.0, &[0.0; 3], &b).unwrap(), 1.0);
    }

    #[test]
    fn bound_i_decays_like_a_power() {
        let b = bf(3);
        let ratios: Vec<f64> = [2.0, 4.0, 8.0, 16.0]
            .iter()
            .map(|&r| bound_i(1e6, &[r, 0.0, 0.0], &b).unwrap() / r.powf(2.0 - 3.0 / b.p))
            .collect();
        let (lo, hi) = ratios.iter().fold((f64::MAX, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(hi / lo < 3.0, "{ratios:?}");
    }

    #[test]
    fn j_needs_five_dimensions() {
        assert!(bound_j(1.0, &[0.0; 3], &bf(3)).is_err());
        let b = bf(5);
        let v = bound_j(1.0, &[0.0; 5], &b).unwrap();
        assert!(v > 0.0 && v <= 1.0 + 1e-9);
    }

    #[test]
    fn zero_kernel_ratio_uses_exact_numerator() {
        let b = bf(3);
        let phi = TestFunction::centered(crate::testfn::TestFnKind::TruncGauss, 3, 1.0, 1.0).unwrap();
        let samples = vec![(1.0, vec![0.0; 3], vec![0.5, 0.0, 0.0]), (4.0, vec![0.0; 3], vec![1.0, 0.0, 0.0])];
        let opts = CheckOptions {
            paths: PathConfig {
                n_paths: 10,
                dt_path: 0.1,
                seed: 0,
            },
            growth_tol: 10.0,
        };
        let r = bound_checks(&CorrelationKernel::zero(3), &phi, &b, &samples, &opts).unwrap();
        assert!(r.second_moment.finite);
        let e = &r.second_moment.entries[0];
        let want = phi.potential_closed(1.0, &[0.0; 3]).unwrap() * phi.potential_closed(1.0, &[0.5, 0.0, 0.0]).unwrap();
        assert!((e.numerator - want).abs() < 1e-6 * want);
        assert!(r.j_vs_i.is_none());
    }
}
