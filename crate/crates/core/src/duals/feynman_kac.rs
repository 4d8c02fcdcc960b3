//! Brownian Feynman-Kac estimators for the moment duals.

use super::heat::{tail_time_integral, Potential};
use crate::error::{Error, Result};
use crate::kernels::CorrelationKernel;
use crate::rng::Stream;
use crate::stats::{monte_carlo, MCEstimate, MC_CHUNK};
use crate::testfn::TestFunction;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Monte Carlo budget shared by the path estimators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathConfig {
    pub n_paths: usize,
    pub dt_path: f64,
    pub seed: u64,
}

impl PathConfig {
    fn validate(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::param("n_paths", "must be positive"));
        }
        if !(self.dt_path > 0.0) {
            return Err(Error::param("dt_path", "must be positive"));
        }
        Ok(())
    }
}

fn gauss_step(x: &mut [f64], sd: f64, s: &mut Stream) {
    for c in x.iter_mut() {
        let z: f64 = StandardNormal.sample(s);
        *c += sd * z;
    }
}

/// Estimates `V^{φ,ψ}_t(x, y)`, the mixed second moment of the linear
/// solution, from pairs of independent Brownian motions started at `x`, `y`.
///
/// Paths use exact Gaussian increments on a uniform mesh of about
/// `dt_path`; the time integrals use the trapezoid rule, whose end term
/// vanishes because `Q_0 = 0`.
pub fn dual_v(
    phi: &TestFunction,
    psi: &TestFunction,
    t: f64,
    x: &[f64],
    y: &[f64],
    kernel: &CorrelationKernel,
    cfg: &PathConfig,
) -> Result<MCEstimate> {
    cfg.validate()?;
    if !(t > 0.0) {
        return Err(Error::param("t", "must be positive"));
    }
    let qphi = Potential::new(phi, t);
    let qpsi = if psi == phi { qphi.clone() } else { Potential::new(psi, t) };
    Ok(dual_v_with(&qphi, &qpsi, t, x, y, kernel, cfg))
}

/// [`dual_v`] with prebuilt potentials, for many evaluations of the same
/// test functions. Both must cover `[0, t]`.
pub fn dual_v_potentials(
    qphi: &Potential,
    qpsi: &Potential,
    t: f64,
    x: &[f64],
    y: &[f64],
    kernel: &CorrelationKernel,
    cfg: &PathConfig,
) -> Result<MCEstimate> {
    cfg.validate()?;
    if !(t > 0.0) {
        return Err(Error::param("t", "must be positive"));
    }
    if !(qphi.covers(t) && qpsi.covers(t)) {
        return Err(Error::param("t", format!("t = {t} lies beyond the tabulated range")));
    }
    Ok(dual_v_with(qphi, qpsi, t, x, y, kernel, cfg))
}

pub(crate) fn dual_v_with(
    qphi: &Potential,
    qpsi: &Potential,
    t: f64,
    x: &[f64],
    y: &[f64],
    kernel: &CorrelationKernel,
    cfg: &PathConfig,
) -> MCEstimate {
    monte_carlo(cfg.n_paths, cfg.seed, |s| v_sample(qphi, qpsi, t, x, y, kernel, cfg.dt_path, s))
}

/// One path-pair sample of the `V^{φ,ψ}_t(x, y)` functional.
fn v_sample(
    qphi: &Potential,
    qpsi: &Potential,
    t: f64,
    x: &[f64],
    y: &[f64],
    kernel: &CorrelationKernel,
    dt_path: f64,
    s: &mut Stream,
) -> f64 {
    let steps = (t / dt_path).ceil().max(1.0) as usize;
    let h = t / steps as f64;
    let sd = h.sqrt();
    let zero = kernel.is_zero();
    let (phi, psi) = (qphi.phi(), qpsi.phi());
    let f = |b: &[f64], bt: &[f64], rem: f64| {
        let a = phi.eval(b);
        let c = psi.eval(bt);
        let mut v = 0.0;
        if a > 0.0 {
            v += a * qpsi.eval(rem, bt);
        }
        if c > 0.0 {
            v += c * qphi.eval(rem, b);
        }
        v
    };
    let mut b = x.to_vec();
    let mut bt = y.to_vec();
    let mut g_prev = if zero { 0.0 } else { kernel.evaluate(&b, &bt) };
    let mut a_int = 0.0;
    let mut sum = 0.5 * h * f(&b, &bt, t);
    for k in 1..steps {
        gauss_step(&mut b, sd, s);
        gauss_step(&mut bt, sd, s);
        if !zero {
            let g = kernel.evaluate(&b, &bt);
            a_int += 0.5 * h * (g_prev + g);
            g_prev = g;
        }
        let v = f(&b, &bt, t - k as f64 * h);
        if v > 0.0 {
            sum += h * v * a_int.exp();
        }
    }
    sum
}

/// Estimates the annealed second moment `E_{δ_x}[Y_t(φ)²]`, i.e.
/// `V^{φφ}_t(x, x) + ∫_0^t ds ∫ p_{t-s}(x, y) V^{φφ}_s(y, y) dy`.
///
/// Each sample combines one path pair for the first term with a uniform
/// time `s`, a Gaussian point `y` and one path pair for the second.
pub fn dual_second_moment(
    phi: &TestFunction,
    t: f64,
    x: &[f64],
    kernel: &CorrelationKernel,
    cfg: &PathConfig,
) -> Result<MCEstimate> {
    cfg.validate()?;
    if !(t > 0.0) {
        return Err(Error::param("t", "must be positive"));
    }
    let pot = Potential::new(phi, t);
    Ok(monte_carlo(cfg.n_paths, cfg.seed, |s| {
        let direct = v_sample(&pot, &pot, t, x, x, kernel, cfg.dt_path, s);
        let u: f64 = s.random::<f64>() * t;
        let mut y = x.to_vec();
        gauss_step(&mut y, (t - u).sqrt(), s);
        let branch = if u > 0.0 { t * v_sample(&pot, &pot, u, &y, &y, kernel, cfg.dt_path, s) } else { 0.0 };
        direct + branch
    }))
}

/// Output of [`dual_expmoment`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpMoment {
    pub estimate: MCEstimate,
    /// `q ε ∫_H^∞ ∫ p_{2s}(z)(|z|^{-α} ∧ 1) dz ds`, an upper bound on the
    /// expected exponent beyond the horizon for any starting pair. The
    /// relative truncation error of the estimate is at most `e^{diag} - 1`.
    pub tail_diagnostic: f64,
}

/// Estimates `Π_{(x,y)}[exp(q ∫_0^H g(B_s, B̃_s) ds)]`.
///
/// Only the difference `β = B - B̃` (variance `2s`) matters. Its mesh grows
/// with `|β|²` so that long horizons stay cheap; the exponent is a left
/// Riemann sum truncated at `H`, which is nondecreasing in `H` for a fixed
/// seed.
pub fn dual_expmoment(
    q: f64,
    kernel: &CorrelationKernel,
    x: &[f64],
    y: &[f64],
    horizon: f64,
    cfg: &PathConfig,
) -> Result<ExpMoment> {
    cfg.validate()?;
    if kernel.is_zero() {
        return Ok(ExpMoment {
            estimate: MCEstimate {
                mean: 1.0,
                stderr: 0.0,
                n_samples: cfg.n_paths,
                seed: cfg.seed,
            },
            tail_diagnostic: 0.0,
        });
    }
    let d = x.len();
    let origin = vec![0.0; d];
    let beta0: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let est = monte_carlo(cfg.n_paths, cfg.seed, |s| {
        let mut beta = beta0.clone();
        let mut t = 0.0;
        let mut a = 0.0;
        while t < horizon {
            let r2: f64 = beta.iter().map(|v| v * v).sum();
            let h = (cfg.dt_path * r2.max(1.0)).min(horizon - t);
            a += q * kernel.evaluate(&beta, &origin) * h;
            gauss_step(&mut beta, (2.0 * h).sqrt(), s);
            t += h;
        }
        a.exp()
    });
    let tail = q * kernel.epsilon * tail_time_integral(kernel.alpha, d, horizon)?;
    Ok(ExpMoment {
        estimate: est,
        tail_diagnostic: tail,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourthBudget {
    pub n_outer: usize,
    pub dt_path: f64,
    /// Cap on simulated Brownian steps, all levels of the recursion included.
    pub max_path_steps: u64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourthEstimate {
    pub estimate: MCEstimate,
    /// The step cap cut the sample count below `n_outer`; the standard error
    /// is correspondingly larger than requested.
    pub budget_exhausted: bool,
}

/// One unbiased sample of `E[Π_i V_1(t, x_i)]` by randomizing the time
/// variable of the Feynman-Kac recursion.
fn product_moment(
    points: &[Vec<f64>],
    t: f64,
    pot: &Potential,
    kernel: &CorrelationKernel,
    dt_path: f64,
    s: &mut Stream,
    steps_used: &mut u64,
) -> f64 {
    let n = points.len();
    if n == 1 {
        return pot.eval(t, &points[0]);
    }
    let tau: f64 = s.random::<f64>() * t;
    let steps = (tau / dt_path).ceil().max(1.0) as usize;
    let h = tau / steps as f64;
    let sd = h.sqrt();
    let mut b: Vec<Vec<f64>> = points.to_vec();
    let zero = kernel.is_zero();
    let pair_sum = |b: &[Vec<f64>]| {
        let mut g = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                g += kernel.evaluate(&b[i], &b[j]);
            }
        }
        g
    };
    let mut g_prev = if zero { 0.0 } else { pair_sum(&b) };
    let mut a = 0.0;
    for _ in 0..steps {
        for p in b.iter_mut() {
            gauss_step(p, sd, s);
        }
        if !zero {
            let g = pair_sum(&b);
            a += 0.5 * h * (g_prev + g);
            g_prev = g;
        }
    }
    *steps_used += (steps * n) as u64;
    let phi = pot.phi();
    let mut sum = 0.0;
    for k in 0..n {
        let w = phi.eval(&b[k]);
        if w > 0.0 {
            let others: Vec<Vec<f64>> = (0..n).filter(|&i| i != k).map(|i| b[i].clone()).collect();
            sum += w * product_moment(&others, t - tau, pot, kernel, dt_path, s, steps_used);
        }
    }
    t * a.exp() * sum
}

/// Estimates `E[Π_{i=1}^n V_1^φ(t, x_i)]` for `n ∈ {3, 4}` by nested
/// randomized Feynman-Kac recursion, bottoming out at `Q_t φ`.
pub fn dual_fourth(
    phi: &TestFunction,
    t: f64,
    points: &[Vec<f64>],
    kernel: &CorrelationKernel,
    budget: &FourthBudget,
) -> Result<FourthEstimate> {
    if !(3..=4).contains(&points.len()) {
        return Err(Error::param("points", "need 3 or 4 starting points"));
    }
    if !(t > 0.0 && budget.dt_path > 0.0) || budget.n_outer == 0 {
        return Err(Error::param("budget", "t, dt_path and n_outer must be positive"));
    }
    let pot = Potential::new(phi, t);
    // Pilot chunk fixes the affordable sample count deterministically.
    let mut pilot_steps = 0u64;
    let mut s = crate::rng::stream(budget.seed, u64::MAX);
    let pilot = MC_CHUNK.min(budget.n_outer);
    for _ in 0..pilot {
        product_moment(points, t, &pot, kernel, budget.dt_path, &mut s, &mut pilot_steps);
    }
    let per = (pilot_steps as f64 / pilot as f64).max(1.0);
    let affordable = (budget.max_path_steps as f64 / per).floor() as usize;
    let n = budget.n_outer.min(affordable.max(2));
    let est = monte_carlo(n, budget.seed, |s| {
        let mut used = 0;
        product_moment(points, t, &pot, kernel, budget.dt_path, s, &mut used)
    });
    Ok(FourthEstimate {
        estimate: est,
        budget_exhausted: n < budget.n_outer,
    })
}
