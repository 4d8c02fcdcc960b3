//! Heat kernel, heat semigroup `P_t`, potential operator `Q_t` and Green
//! function, by radial reduction.

use crate::error::{Error, Result};
use crate::kernels::dist;
use crate::quadrature::{gauss_legendre, integrate, integrate_to_infinity, QuadConfig};
use crate::special::{gamma_lower, gamma_p, noncentral_chi2_cdf, normal_interval, sphere_area};
use crate::stats::map_indices;
use crate::testfn::TestFunction;
use std::f64::consts::PI;

/// Gaussian transition density `p_t(x, y)` in `R^d`.
pub fn heat_p(t: f64, x: &[f64], y: &[f64]) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::param("t", format!("heat kernel needs t > 0, got {t}")));
    }
    let d = x.len() as f64;
    let r = dist(x, y);
    Ok((2.0 * PI * t).powf(-d / 2.0) * (-r * r / (2.0 * t)).exp())
}

/// `P(|x - c + √t Z| ≤ r)` for a standard normal `Z` in `R^d`.
fn ball_prob(d: usize, offset: f64, t: f64, r: f64) -> f64 {
    noncentral_chi2_cdf(r * r / t, d, offset * offset / t)
}

/// `P_t φ(x)`.
///
/// Writes `φ = f(|· - c|)` and uses `E f(R) = ∫_0^K (-f'(r)) P(R ≤ r) dr`,
/// with the law of `R = |x - c + √t Z|` a scaled noncentral chi distribution.
pub fn apply_p(phi: &TestFunction, t: f64, x: &[f64]) -> f64 {
    apply_p_tol(phi, t, x, 1e-10)
}

fn apply_p_tol(phi: &TestFunction, t: f64, x: &[f64], rel_tol: f64) -> f64 {
    if t <= 0.0 {
        return phi.eval(x);
    }
    let d = phi.dim();
    let a = phi.r(x);
    let k = phi.radius;
    // Quick exit far outside the support.
    let gap = a - k;
    if gap > 0.0 && gap * gap / (2.0 * t) > 700.0 {
        return 0.0;
    }
    let cfg = QuadConfig::with_rel_tol(rel_tol);
    integrate(|r| phi.neg_derivative(r) * ball_prob(d, a, t, r), 0.0, k, &cfg)
}

/// `Q_t φ(x) = ∫_0^t P_s φ(x) ds`.
pub fn apply_q(phi: &TestFunction, t: f64, x: &[f64]) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let cfg = QuadConfig::with_rel_tol(1e-8);
    integrate(|s| apply_p(phi, s, x), 0.0, t, &cfg)
}

/// Evaluator of `Q_s φ(x)` for `s ∈ [0, t_max]`, used inside path loops.
///
/// Uses the closed form when the test function has one, otherwise a
/// bilinear table in `(s, |x - c|)` built from [`apply_q`].
#[derive(Clone, Debug)]
pub struct Potential {
    phi: TestFunction,
    table: Option<Table>,
}

#[derive(Clone, Debug)]
struct Table {
    ds: f64,
    dr: f64,
    ns: usize,
    nr: usize,
    vals: Vec<f64>,
}

impl Potential {
    pub fn new(phi: &TestFunction, t_max: f64) -> Self {
        if phi.potential_closed(0.0, &phi.center).is_some() {
            return Potential {
                phi: phi.clone(),
                table: None,
            };
        }
        let ns = 64usize;
        let nr = 160usize;
        let r_max = phi.radius + 8.0 * t_max.sqrt();
        let ds = t_max / (ns - 1) as f64;
        let dr = r_max / (nr - 1) as f64;
        // Five-point Gauss-Legendre on each time cell, accumulated in s.
        const GL: [(f64, f64); 5] = [
            (0.0, 0.568_888_888_888_888_9),
            (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
            (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
            (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
            (0.906_179_845_938_664, 0.236_926_885_056_189_1),
        ];
        let cols = map_indices(nr, |j| {
            let mut x = phi.center.clone();
            x[0] += j as f64 * dr;
            let mut col = vec![0.0; ns];
            let mut acc = 0.0;
            for i in 1..ns {
                let mid = (i as f64 - 0.5) * ds;
                acc += GL
                    .iter()
                    .map(|&(z, w)| 0.5 * ds * w * apply_p_tol(phi, mid + 0.5 * ds * z, &x, 1e-8))
                    .sum::<f64>();
                col[i] = acc;
            }
            col
        });
        let mut vals = vec![0.0; ns * nr];
        for (j, col) in cols.iter().enumerate() {
            for i in 0..ns {
                vals[i * nr + j] = col[i];
            }
        }
        Potential {
            phi: phi.clone(),
            table: Some(Table { ds, dr, ns, nr, vals }),
        }
    }

    pub fn phi(&self) -> &TestFunction {
        &self.phi
    }

    /// Whether `Q_s φ` is available for every `s ≤ t`.
    pub fn covers(&self, t: f64) -> bool {
        self.table
            .as_ref()
            .map_or(true, |tb| t <= tb.ds * (tb.ns - 1) as f64 * (1.0 + 1e-12))
    }

    /// `Q_s φ(x)`.
    pub fn eval(&self, s: f64, x: &[f64]) -> f64 {
        match &self.table {
            None => self.phi.potential_closed(s, x).expect("closed form"),
            Some(tb) => {
                if s <= 0.0 {
                    return 0.0;
                }
                let r = self.phi.r(x);
                let u = (s / tb.ds).min((tb.ns - 1) as f64);
                let v = r / tb.dr;
                if v >= (tb.nr - 1) as f64 {
                    return 0.0;
                }
                let (i, j) = ((u as usize).min(tb.ns - 2), v as usize);
                let (a, b) = (u - i as f64, v - j as f64);
                let at = |i: usize, j: usize| tb.vals[i * tb.nr + j];
                (1.0 - a) * ((1.0 - b) * at(i, j) + b * at(i, j + 1))
                    + a * ((1.0 - b) * at(i + 1, j) + b * at(i + 1, j + 1))
            }
        }
    }
}

/// `⟨λ_box, Q_t φ⟩ = ∫_0^t ∫ φ(y) P(y + B_s ∈ [-L, L]^d) dy ds`.
///
/// The box probability factorizes over axes, so a tensor Gauss-Legendre rule
/// on the support cube and in time needs one 1-d table per time node. The
/// kink of the support boundary limits the accuracy to about `1e-5`
/// relative for the bump.
pub fn box_potential_mass(phi: &TestFunction, half_width: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let d = phi.dim();
    let per_axis = match d {
        0..=3 => 32,
        4 => 20,
        _ => 14,
    };
    let space = gauss_legendre(per_axis);
    let time = gauss_legendre(24);
    let k = phi.radius;
    // Time nodes in sqrt(s), which resolves the start-up layer near s = 0.
    let rt = t.sqrt();
    let mut total = 0.0;
    let n_pts = per_axis.pow(d as u32);
    let mut y = vec![0.0; d];
    let mut idx = vec![0usize; d];
    for &(zt, wt) in &time {
        let r = 0.5 * rt * (zt + 1.0);
        let s = r * r;
        let w_time = 0.5 * rt * wt * 2.0 * r;
        let sd = s.sqrt();
        let axis: Vec<Vec<f64>> = (0..d)
            .map(|a| {
                space
                    .iter()
                    .map(|&(z, _)| {
                        let ya = phi.center[a] + k * z;
                        normal_interval((-half_width - ya) / sd, (half_width - ya) / sd)
                    })
                    .collect()
            })
            .collect();
        let mut acc = 0.0;
        for flat in 0..n_pts {
            let mut rem = flat;
            for a in (0..d).rev() {
                idx[a] = rem % per_axis;
                rem /= per_axis;
            }
            let mut w = 1.0;
            let mut prob = 1.0;
            for a in 0..d {
                y[a] = phi.center[a] + k * space[idx[a]].0;
                w *= k * space[idx[a]].1;
                prob *= axis[a][idx[a]];
            }
            let f = phi.eval(&y);
            if f > 0.0 {
                acc += w * f * prob;
            }
        }
        total += w_time * acc;
    }
    total
}

/// Green function `∫_0^∞ p_{2s}(z, y) ds` of the difference of two
/// independent Brownian motions.
///
/// Time quadrature on `[0, r²]`; the tail is `(4π)^{-d/2} (r²/4)^{1-d/2}
/// γ(d/2 - 1, 1/4)`.
pub fn green_g(z: &[f64], y: &[f64]) -> Result<f64> {
    let d = z.len();
    if d < 3 {
        return Err(Error::Divergent(format!("Green function needs d >= 3, got {d}")));
    }
    let r = dist(z, y);
    if r == 0.0 {
        return Err(Error::Singular("Green function evaluated at z = y".into()));
    }
    let df = d as f64;
    let r2 = r * r;
    let s_max = r2;
    let cfg = QuadConfig::with_rel_tol(1e-12);
    let head = integrate(
        |s| {
            if s <= 0.0 {
                0.0
            } else {
                (4.0 * PI * s).powf(-df / 2.0) * (-r2 / (4.0 * s)).exp()
            }
        },
        0.0,
        s_max,
        &cfg,
    );
    let tail = (4.0 * PI).powf(-df / 2.0) * (r2 / 4.0).powf(1.0 - df / 2.0) * gamma_lower(df / 2.0 - 1.0, r2 / (4.0 * s_max));
    Ok(head + tail)
}

/// `∫ p_t(x) (|x|^{-α} ∧ 1) dx`.
///
/// The ball part is a chi-square probability; the outer part is a radial
/// quadrature in `log r`.
pub fn tail_integral(alpha: f64, d: usize, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::param("t", format!("needs t > 0, got {t}")));
    }
    let df = d as f64;
    let inner = gamma_p(df / 2.0, 1.0 / (2.0 * t));
    let norm = sphere_area(d) * (2.0 * PI * t).powf(-df / 2.0);
    let cfg = QuadConfig::with_rel_tol(1e-10);
    let u_max = (1.0f64).max(t.sqrt() * 40.0).ln();
    let outer = integrate(
        |u| {
            let r = u.exp();
            norm * ((df - alpha) * u).exp() * (-r * r / (2.0 * t)).exp()
        },
        0.0,
        u_max,
        &cfg,
    );
    Ok(inner + outer)
}

/// `∫_{s0}^∞ tail_integral(α, d, 2s) ds`.
pub fn tail_time_integral(alpha: f64, d: usize, s0: f64) -> Result<f64> {
    let cfg = QuadConfig::with_rel_tol(1e-8);
    let mut err = None;
    let v = integrate_to_infinity(
        |s| match tail_integral(alpha, d, 2.0 * s) {
            Ok(v) => v,
            Err(e) => {
                err = Some(e);
                0.0
            }
        },
        s0,
        &cfg,
    );
    match err {
        Some(e) if s0 > 0.0 => Err(e),
        _ => Ok(v),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testfn::TestFnKind;

    #[test]
    fn heat_kernel_values() {
        let v = heat_p(1.0, &[0.0], &[0.0]).unwrap();
        assert!((v - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert!(heat_p(0.0, &[0.0], &[0.0]).is_err());
        // normalization in d = 3 by radial quadrature
        let c = QuadConfig::with_rel_tol(1e-12);
        let m = integrate_to_infinity(
            |r| 4.0 * PI * r * r * heat_p(0.7, &[0.0; 3], &[r, 0.0, 0.0]).unwrap(),
            0.0,
            &c,
        );
        assert!((m - 1.0).abs() < 1e-8);
    }

    #[test]
    fn chapman_kolmogorov_in_one_dimension() {
        let c = QuadConfig::with_rel_tol(1e-12);
        let lhs = integrate(
            |z| heat_p(0.3, &[0.1], &[z]).unwrap() * heat_p(0.5, &[z], &[0.9]).unwrap(),
            -15.0,
            15.0,
            &c,
        );
        assert!((lhs - heat_p(0.8, &[0.1], &[0.9]).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn apply_p_matches_gaussian_convolution() {
        let phi = TestFunction::centered(TestFnKind::TruncGauss, 3, 1.2, 1.5).unwrap();
        for &(t, x) in &[(0.1, 0.0), (0.5, 0.7), (2.0, 2.5), (0.01, 0.3)] {
            let p = [x, 0.1, -0.2];
            let a = apply_p(&phi, t, &p);
            let b = phi.heat_closed(t, &p).unwrap();
            assert!((a - b).abs() < 1e-5, "t={t} x={x}: {a} vs {b}");
        }
    }

    #[test]
    fn apply_q_matches_closed_form_and_is_linear() {
        let phi = TestFunction::centered(TestFnKind::TruncGauss, 3, 1.0, 1.0).unwrap();
        let x = [0.3, 0.4, 0.0];
        let a = apply_q(&phi, 1.0, &x);
        assert!((a - phi.potential_closed(1.0, &x).unwrap()).abs() < 1e-5);
        let mut phi2 = phi.clone();
        phi2.amplitude = 2.5;
        assert!((apply_q(&phi2, 1.0, &x) - 2.5 * a).abs() < 1e-12 * a);
    }

    #[test]
    fn far_field_is_below_the_gaussian_tail() {
        let phi = TestFunction::centered(TestFnKind::Bump, 3, 1.0, 1.0).unwrap();
        let x = [6.0, 0.0, 0.0];
        let v = apply_p(&phi, 0.5, &x);
        // mass <= 1 * vol(ball), distance >= 5
        let bound = 4.0 / 3.0 * PI * (2.0 * PI * 0.5f64).powf(-1.5) * (-25.0f64).exp();
        assert!(v >= 0.0 && v <= bound);
    }

    #[test]
    fn tabulated_potential_tracks_quadrature() {
        let phi = TestFunction::centered(TestFnKind::Bump, 3, 1.0, 1.0).unwrap();
        let pot = Potential::new(&phi, 1.0);
        let x = [0.35, 0.0, 0.0];
        let a = pot.eval(0.6, &x);
        let b = apply_q(&phi, 0.6, &x);
        assert!((a - b).abs() < 2e-3 * b, "{a} {b}");
    }

    #[test]
    fn box_mass_approaches_free_mass_in_a_large_box() {
        let phi = TestFunction::centered(TestFnKind::TruncGauss, 3, 1.0, 1.0).unwrap();
        let m = phi.lebesgue_integral();
        let big = box_potential_mass(&phi, 50.0, 1.0);
        assert!((big - m).abs() < 1e-7 * m, "{big} {m}");
        let small = box_potential_mass(&phi, 1.5, 1.0);
        assert!(small < big && small > 0.5 * big);
        let bump = TestFunction::centered(TestFnKind::Bump, 3, 1.0, 1.0).unwrap();
        let b = box_potential_mass(&bump, 50.0, 2.0);
        assert!((b - 2.0 * bump.lebesgue_integral()).abs() < 1e-4 * b, "{b}");
    }

    #[test]
    fn green_function_d3_and_scaling() {
        let g = green_g(&[0.0; 3], &[1.0, 0.0, 0.0]).unwrap();
        assert!((g - 1.0 / (4.0 * PI)).abs() < 1e-10);
        for &r in &[0.5, 2.0, 4.0] {
            let v = green_g(&[0.0; 3], &[r, 0.0, 0.0]).unwrap() * r;
            assert!((v - g).abs() < 1e-6 * g);
        }
        assert!(green_g(&[0.0; 4], &[1.0, 0.0, 0.0, 0.0]).unwrap() > 0.0);
        assert!(matches!(green_g(&[0.0; 3], &[0.0; 3]), Err(Error::Singular(_))));
    }
}
