//! Compactly supported radial test functions `φ`.

use crate::error::{Error, Result};
use crate::special::{ball_volume, gamma_lower_scaled, gamma_p, sphere_area};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestFnKind {
    /// `A (1 - (r/K)²)²` on `r < K`.
    Bump,
    /// `A (e^{-r²/2σ²} - e^{-K²/2σ²})₊` with `σ = K/6`.
    TruncGauss,
}

/// Nonnegative radial test function supported in `|x - center| ≤ radius`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub kind: TestFnKind,
    pub center: Vec<f64>,
    pub radius: f64,
    pub amplitude: f64,
}

/// `e^{-K²/2σ²}` for `σ = K/6`.
const GAUSS_FLOOR: f64 = 1.522_997_974_471_263e-8;

impl TestFunction {
    pub fn new(kind: TestFnKind, center: Vec<f64>, radius: f64, amplitude: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::param("phi.radius", format!("must be positive, got {radius}")));
        }
        if !(amplitude.is_finite() && amplitude > 0.0) {
            return Err(Error::param("phi.amplitude", format!("must be positive, got {amplitude}")));
        }
        if center.is_empty() || center.iter().any(|c| !c.is_finite()) {
            return Err(Error::param("phi.center", "must be a finite point"));
        }
        Ok(TestFunction {
            kind,
            center,
            radius,
            amplitude,
        })
    }

    /// Centered at the origin of `R^d`.
    pub fn centered(kind: TestFnKind, dim: usize, radius: f64, amplitude: f64) -> Result<Self> {
        Self::new(kind, vec![0.0; dim], radius, amplitude)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn sigma(&self) -> f64 {
        self.radius / 6.0
    }

    /// Distance from the center.
    pub fn r(&self, x: &[f64]) -> f64 {
        self.r2(x).sqrt()
    }

    fn r2(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.center).map(|(a, c)| (a - c) * (a - c)).sum()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let r2 = self.r2(x);
        if r2 >= self.radius * self.radius {
            return 0.0;
        }
        self.profile_sq(r2)
    }

    /// Radial profile `f(r)`.
    pub fn profile(&self, r: f64) -> f64 {
        if r >= self.radius {
            0.0
        } else {
            self.profile_sq(r * r)
        }
    }

    fn profile_sq(&self, r2: f64) -> f64 {
        match self.kind {
            TestFnKind::Bump => {
                let u = 1.0 - r2 / (self.radius * self.radius);
                self.amplitude * u * u
            }
            TestFnKind::TruncGauss => {
                let s2 = self.sigma() * self.sigma();
                self.amplitude * ((-r2 / (2.0 * s2)).exp() - GAUSS_FLOOR).max(0.0)
            }
        }
    }

    /// `-f'(r)`, nonnegative on `[0, K)`.
    pub fn neg_derivative(&self, r: f64) -> f64 {
        if r >= self.radius || r < 0.0 {
            return 0.0;
        }
        match self.kind {
            TestFnKind::Bump => {
                let k2 = self.radius * self.radius;
                4.0 * self.amplitude * r * (1.0 - r * r / k2) / k2
            }
            TestFnKind::TruncGauss => {
                let s2 = self.sigma() * self.sigma();
                self.amplitude * r / s2 * (-r * r / (2.0 * s2)).exp()
            }
        }
    }

    /// `⟨λ, φ⟩` in closed form.
    pub fn lebesgue_integral(&self) -> f64 {
        let d = self.dim();
        let df = d as f64;
        let k = self.radius;
        match self.kind {
            TestFnKind::Bump => {
                self.amplitude * sphere_area(d) * k.powi(d as i32)
                    * (1.0 / df - 2.0 / (df + 2.0) + 1.0 / (df + 4.0))
            }
            TestFnKind::TruncGauss => {
                let s2 = self.sigma() * self.sigma();
                self.amplitude
                    * ((2.0 * PI * s2).powf(df / 2.0) * gamma_p(df / 2.0, 18.0)
                        - GAUSS_FLOOR * ball_volume(d) * k.powi(d as i32))
            }
        }
    }

    /// Is the support inside `[-L, L]^d`?
    pub fn inside_box(&self, half_width: f64) -> bool {
        self.center
            .iter()
            .all(|c| c - self.radius >= -half_width && c + self.radius <= half_width)
    }

    /// `P_t φ(x)` in closed form where one exists (TruncGauss, up to an
    /// absolute error below `A e^{-18}`).
    pub fn heat_closed(&self, t: f64, x: &[f64]) -> Option<f64> {
        if self.kind != TestFnKind::TruncGauss {
            return None;
        }
        let s2 = self.sigma() * self.sigma();
        let w = s2 + t;
        let d = self.dim() as f64;
        Some(self.amplitude * (s2 / w).powf(d / 2.0) * (-self.r2(x) / (2.0 * w)).exp())
    }

    /// `Q_t φ(x) = ∫_0^t P_s φ(x) ds` in closed form where one exists, with
    /// the same error as [`Self::heat_closed`] times `t`.
    pub fn potential_closed(&self, t: f64, x: &[f64]) -> Option<f64> {
        if self.kind != TestFnKind::TruncGauss {
            return None;
        }
        if t <= 0.0 {
            return Some(0.0);
        }
        let s2 = self.sigma() * self.sigma();
        let d = self.dim() as f64;
        let a = d / 2.0 - 1.0;
        let half_r2 = 0.5 * self.r2(x);
        let w0 = s2;
        let w1 = s2 + t;
        // σ^d ∫_{w0}^{w1} w^{-d/2} e^{-r²/2w} dw, rewritten through v^{-a} γ(a, v).
        let term = |w: f64| w.powf(-a) * gamma_lower_scaled(a, half_r2 / w);
        let sd = s2.powf(d / 2.0);
        Some(self.amplitude * sd * (term(w0) - term(w1)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{integrate, QuadConfig};

    #[test]
    fn lebesgue_integral_matches_radial_quadrature() {
        for kind in [TestFnKind::Bump, TestFnKind::TruncGauss] {
            for d in [3usize, 5] {
                let f = TestFunction::centered(kind, d, 1.3, 2.0).unwrap();
                let q = integrate(
                    |r| sphere_area(d) * r.powi(d as i32 - 1) * f.profile(r),
                    0.0,
                    1.3,
                    &QuadConfig::with_rel_tol(1e-12),
                );
                assert!((q - f.lebesgue_integral()).abs() < 1e-10 * q, "{kind:?} {d}");
            }
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        for kind in [TestFnKind::Bump, TestFnKind::TruncGauss] {
            let f = TestFunction::centered(kind, 3, 1.0, 1.0).unwrap();
            for &r in &[0.1, 0.3, 0.7] {
                let h = 1e-6;
                let fd = (f.profile(r - h) - f.profile(r + h)) / (2.0 * h);
                assert!((fd - f.neg_derivative(r)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn potential_closed_near_center_is_continuous() {
        let f = TestFunction::centered(TestFnKind::TruncGauss, 3, 1.0, 1.0).unwrap();
        let a = f.potential_closed(1.0, &[0.0, 0.0, 0.0]).unwrap();
        let b = f.potential_closed(1.0, &[1e-7, 0.0, 0.0]).unwrap();
        assert!((a - b).abs() < 1e-10);
        let c = integrate(
            |s| f.heat_closed(s, &[0.4, 0.1, 0.0]).unwrap(),
            0.0,
            1.0,
            &QuadConfig::with_rel_tol(1e-12),
        );
        let e = f.potential_closed(1.0, &[0.4, 0.1, 0.0]).unwrap();
        assert!((c - e).abs() < 1e-10 * c, "{c} {e}");
    }

    #[test]
    fn support_and_box() {
        let f = TestFunction::centered(TestFnKind::Bump, 3, 1.0, 1.0).unwrap();
        assert_eq!(f.eval(&[1.0, 0.0, 0.0]), 0.0);
        assert!((f.eval(&[0.0; 3]) - 1.0).abs() < 1e-15);
        assert!(f.inside_box(1.0) && !f.inside_box(0.9));
        assert!(TestFunction::centered(TestFnKind::Bump, 3, -1.0, 1.0).is_err());
    }
}
