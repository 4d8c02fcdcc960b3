//! Browser bindings for the demo page in `www/`.
//!
//! Arrays cross the boundary as flat `Vec<f64>`; each export documents its
//! layout. Errors surface as JS exceptions carrying the core error message.

use supenv::config::Config;
use supenv::experiments::Setup;
use supenv::kernels::{epsilon_threshold, green_constant, green_integral, CorrelationKernel, KernelKind};
use supenv::particles::steps_for;
use supenv::quadrature::QuadConfig;
use supenv::spde::quenched_v1;
use supenv::testfn::TestFnKind;
use wasm_bindgen::prelude::*;

fn js(e: supenv::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn kind(name: &str) -> Result<KernelKind, JsError> {
    match name {
        "Zero" => Ok(KernelKind::Zero),
        "CauchyPD" => Ok(KernelKind::CauchyPD),
        "PowerCapped" => Ok(KernelKind::PowerCapped),
        "SeparableCauchy" => Ok(KernelKind::SeparableCauchy),
        other => Err(JsError::new(&format!("unknown kernel kind {other:?}"))),
    }
}

/// Radial profile on `points` radii in `[0, r_max]`, as `[r, g(r), envelope(r)]`
/// triples.
#[wasm_bindgen]
pub fn kernel_profile(name: &str, epsilon: f64, alpha: f64, dim: usize, r_max: f64, points: usize) -> Result<Vec<f64>, JsError> {
    let k = CorrelationKernel::new(kind(name)?, epsilon, alpha, dim).map_err(js)?;
    let n = points.max(2);
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        let r = r_max * i as f64 / (n - 1) as f64;
        out.extend([r, k.radial(r), k.bound(r)]);
    }
    Ok(out)
}

/// `[∫ (|z|^{-α} ∧ 1)|z|^{2-d} dz, G(0, e₁)·|e₁|^{d-2}, ε*(q)]`: the Green
/// integral, the Green constant, and the largest amplitude for which the
/// exponential moment of order `q` stays finite.
#[wasm_bindgen]
pub fn threshold(q: f64, alpha: f64, dim: usize) -> Result<Vec<f64>, JsError> {
    let gi = green_integral(alpha, dim, &QuadConfig::with_rel_tol(1e-10)).map_err(js)?;
    let eps = epsilon_threshold(q, alpha, dim).map_err(js)?;
    Ok(vec![gi, green_constant(dim), eps])
}

/// Runs `clouds` particle systems of `n` particles per unit mass through one
/// sampled environment on `[-2, 2]³` and returns
/// `[quenched mean, annealed mean, Y_0, ..., Y_{clouds-1}]`, where `Y` is the
/// occupation of a bump of radius 1.5 up to time `t`.
#[wasm_bindgen]
pub fn quenched_demo(epsilon: f64, alpha: f64, n: usize, m: usize, t: f64, clouds: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    let mut c = Config::default();
    c.dim = 3;
    c.seed = seed;
    c.kernel.kind = if epsilon == 0.0 { KernelKind::Zero } else { KernelKind::CauchyPD };
    c.kernel.epsilon = epsilon;
    c.kernel.alpha = alpha;
    c.grid.half_width = 2.0;
    c.grid.m = m;
    c.sim.n = n;
    c.sim.horizon = t;
    c.phi.kind = TestFnKind::Bump;
    c.phi.radius = 1.5;
    c.validate().map_err(js)?;
    let s = Setup::new(&c).map_err(js)?;
    let path = s.path(0, steps_for(t, s.dt()).map_err(js)?);
    let target = quenched_v1(&s.phi, &path, &[t], &s.opts).map_err(js)?.masses()[0];
    let mut out = vec![target, s.annealed_target(t)];
    for k in 0..clouds {
        let mut cloud = s.poisson_cloud(0, k).map_err(js)?;
        out.push(s.occupation(&mut cloud, &path, &[t]).map_err(js)?[0]);
    }
    Ok(out)
}
