//! Spatial correlation kernels `g(x, y)` of the environment.

use crate::error::{Error, Result};
use crate::quadrature::{check_finite, integrate, integrate_to_infinity, QuadConfig};
use crate::special::sphere_area;
use faer::Mat;
use serde::{Deserialize, Serialize};
use libm::tgamma as gamma;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

/// Family of the kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelKind {
    /// `g ≡ 0`: the classical superprocess.
    Zero,
    /// `ε (1 + |x-y|²)^{-α/2}`, positive definite.
    CauchyPD,
    /// `ε (|x-y|^{-α} ∧ 1)`, the envelope itself. Not positive definite in
    /// general; field sampling clips its spectrum.
    PowerCapped,
    /// `ε Π_k (1 + (x_k-y_k)²)^{-α/2}`. Positive definite, below the
    /// envelope, and a tensor product on a lattice so large grids factor
    /// axis by axis.
    SeparableCauchy,
    /// Radial profile supplied in code via [`CorrelationKernel::custom`].
    Custom,
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            KernelKind::Zero => "Zero",
            KernelKind::CauchyPD => "CauchyPD",
            KernelKind::PowerCapped => "PowerCapped",
            KernelKind::SeparableCauchy => "SeparableCauchy",
            KernelKind::Custom => "Custom",
        };
        f.write_str(s)
    }
}

pub type RadialProfile = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Correlation kernel with amplitude `epsilon` and tail exponent `alpha`.
#[derive(Clone)]
pub struct CorrelationKernel {
    pub kind: KernelKind,
    pub epsilon: f64,
    pub alpha: f64,
    pub dim: usize,
    profile: Option<RadialProfile>,
}

impl fmt::Debug for CorrelationKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CorrelationKernel")
            .field("kind", &self.kind)
            .field("epsilon", &self.epsilon)
            .field("alpha", &self.alpha)
            .field("dim", &self.dim)
            .finish()
    }
}

impl PartialEq for CorrelationKernel {
    fn eq(&self, o: &Self) -> bool {
        self.kind == o.kind
            && self.epsilon == o.epsilon
            && self.alpha == o.alpha
            && self.dim == o.dim
            && match (&self.profile, &o.profile) {
                (None, None) => true,
                (Some(a), Some(b)) => Arc::ptr_eq(a, b),
                _ => false,
            }
    }
}

impl CorrelationKernel {
    /// Validated kernel of a built-in kind.
    pub fn new(kind: KernelKind, epsilon: f64, alpha: f64, dim: usize) -> Result<Self> {
        if kind == KernelKind::Custom {
            return Err(Error::param("kind", "Custom kernels are built with CorrelationKernel::custom"));
        }
        validate(epsilon, alpha, dim)?;
        Ok(CorrelationKernel {
            kind,
            epsilon,
            alpha,
            dim,
            profile: None,
        })
    }

    pub fn zero(dim: usize) -> Self {
        CorrelationKernel {
            kind: KernelKind::Zero,
            epsilon: 0.0,
            alpha: 3.0,
            dim: dim.max(3),
            profile: None,
        }
    }

    /// Kernel `g(x,y) = profile(|x-y|)`. The profile is checked against the
    /// envelope `ε (r^{-α} ∧ 1)` on a logarithmic radius sweep.
    pub fn custom(profile: RadialProfile, epsilon: f64, alpha: f64, dim: usize) -> Result<Self> {
        validate(epsilon, alpha, dim)?;
        for i in 0..=600 {
            let r = 10f64.powf(-3.0 + i as f64 / 100.0);
            let v = profile(r);
            let env = envelope(epsilon, alpha, r);
            if !(v.is_finite() && v >= 0.0 && v <= env * (1.0 + 1e-12)) {
                return Err(Error::param(
                    "kernel",
                    format!("custom profile {v} at r = {r} violates the bound {env}"),
                ));
            }
        }
        Ok(CorrelationKernel {
            kind: KernelKind::Custom,
            epsilon,
            alpha,
            dim,
            profile: Some(profile),
        })
    }

    /// Same kernel with a different amplitude.
    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        let mut k = self.clone();
        k.epsilon = epsilon;
        k
    }

    pub fn is_zero(&self) -> bool {
        self.kind == KernelKind::Zero || self.epsilon == 0.0
    }

    /// Is the kernel a covariance function? PowerCapped and Custom are not
    /// guaranteed to be.
    pub fn is_positive_definite(&self) -> bool {
        matches!(
            self.kind,
            KernelKind::Zero | KernelKind::CauchyPD | KernelKind::SeparableCauchy
        )
    }

    /// `g(x, y)`.
    pub fn evaluate(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.kind {
            KernelKind::Zero => 0.0,
            KernelKind::SeparableCauchy => {
                let p: f64 = x.iter().zip(y).map(|(a, b)| 1.0 + (a - b) * (a - b)).product();
                self.epsilon * p.powf(-0.5 * self.alpha)
            }
            _ => self.radial(dist(x, y)),
        }
    }

    /// `g` as a function of the distance, for the radial kinds.
    /// SeparableCauchy returns its on-axis profile.
    pub fn radial(&self, r: f64) -> f64 {
        match self.kind {
            KernelKind::Zero => 0.0,
            KernelKind::CauchyPD | KernelKind::SeparableCauchy => {
                self.epsilon * (1.0 + r * r).powf(-0.5 * self.alpha)
            }
            KernelKind::PowerCapped => envelope(self.epsilon, self.alpha, r),
            KernelKind::Custom => (self.profile.as_ref().expect("custom profile"))(r),
        }
    }

    /// The envelope `ε (r^{-α} ∧ 1)`.
    pub fn bound(&self, r: f64) -> f64 {
        envelope(self.epsilon, self.alpha, r)
    }

    /// One-dimensional factor of a separable kernel, without the amplitude.
    pub(crate) fn axis_factor(&self, dx: f64) -> f64 {
        (1.0 + dx * dx).powf(-0.5 * self.alpha)
    }
}

fn validate(epsilon: f64, alpha: f64, dim: usize) -> Result<()> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::param("kernel.epsilon", format!("must be finite and >= 0, got {epsilon}")));
    }
    if !(alpha.is_finite() && alpha > 2.0) {
        return Err(Error::param(
            "kernel.alpha",
            format!("requires alpha > 2 (standing assumption d >= 3, alpha > 2), got {alpha}"),
        ));
    }
    if dim < 3 {
        return Err(Error::param("dim", format!("requires d >= 3, got {dim}")));
    }
    Ok(())
}

fn envelope(epsilon: f64, alpha: f64, r: f64) -> f64 {
    if r <= 1.0 {
        epsilon
    } else {
        epsilon * r.powf(-alpha)
    }
}

pub(crate) fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// `M[i][j] = g(points[i], points[j])`.
pub fn gram_matrix(kernel: &CorrelationKernel, points: &[Vec<f64>]) -> Mat<f64> {
    let n = points.len();
    let mut m = Mat::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.evaluate(&points[i], &points[j]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// `∫_{R^d} (|y|^{-α} ∧ 1) |y|^{2-d} dy` by radial reduction.
pub fn green_integral(alpha: f64, d: usize, quad: &QuadConfig) -> Result<f64> {
    if !(alpha > 2.0) || d < 3 {
        return Err(Error::Divergent(format!(
            "green integral needs alpha > 2 and d >= 3 (alpha = {alpha}, d = {d})"
        )));
    }
    let inner = integrate(|r| r, 0.0, 1.0, quad);
    let outer = integrate_to_infinity(|r| r.powf(1.0 - alpha), 1.0, quad);
    check_finite("green integral", sphere_area(d) * (inner + outer))
}

/// Prefactor `C_d` of the Green function `G(z,y) = C_d |z-y|^{2-d}` of the
/// difference of two independent Brownian motions.
pub fn green_constant(d: usize) -> f64 {
    gamma(d as f64 / 2.0 - 1.0) / (4.0 * PI.powf(d as f64 / 2.0))
}

/// Largest `ε` with `q ε ∫ (|y|^{-α} ∧ 1) G(0, y) dy ≤ 1/2`.
///
/// The supremum over the starting point is taken at the origin, where the
/// radially decreasing envelope puts its mass closest to the pole of `G`.
pub fn epsilon_threshold(q: f64, alpha: f64, d: usize) -> Result<f64> {
    if !(q > 0.0) {
        return Err(Error::param("q", format!("must be positive, got {q}")));
    }
    let gi = green_integral(alpha, d, &QuadConfig::with_rel_tol(1e-10))?;
    Ok(1.0 / (2.0 * q * green_constant(d) * gi))
}
