//! Explicit Euler grid solvers for the conditional log-Laplace equations.
//!
//! All solvers share one step rule,
//!
//! ```text
//! V(t+Δt) = V(t) + Δt [½ Δ_h V(t) + source(t)] + V(t) ΔW(t)
//! ```
//!
//! with the `(2d+1)`-point Laplacian under a zero-flux boundary (so
//! `Σ_cells Δ_h V = 0`) and the noise at the left endpoint. The discrete
//! versions of the integral identities are defined with the same left
//! Riemann convention, which makes them exact up to rounding.
//!
//! A solver consumes the increments of a [`NoisePath`] either in recorded
//! order or reversed. The particle system reads the noise forward while the
//! conditional mean `E^W[Y_t(φ)] = ⟨μ, V_1(t)⟩` integrates the dual backward,
//! so quenched comparisons at horizon `T` use [`NoiseOrder::Reversed`] on the
//! first `T/Δt` increments.

use crate::environment::{FieldFactor, GridSpec, NoisePath};
use crate::error::{Error, Result};
use crate::particles::steps_for;
use crate::testfn::TestFunction;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolutionLabel {
    V1,
    U,
    UT,
    VT,
    /// `V_n` for `n ≥ 2`.
    V(u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseOrder {
    Forward,
    Reversed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StorePolicy {
    EveryStep,
    Final,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stability constant in `Δt ≤ c_stab h² / d`.
    pub c_stab: f64,
    pub store: StorePolicy,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            c_stab: 1.0,
            store: StorePolicy::EveryStep,
        }
    }
}

/// Grid values of one solution at a list of times.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSolution {
    pub grid: GridSpec,
    pub dt: f64,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub label: SolutionLabel,
}

impl FieldSolution {
    pub fn last(&self) -> &[f64] {
        self.values.last().expect("nonempty solution")
    }

    pub fn t_max(&self) -> f64 {
        *self.times.last().expect("nonempty solution")
    }

    /// `⟨λ_grid, V(t_k)⟩` for every stored time.
    pub fn masses(&self) -> Vec<f64> {
        let w = self.grid.cell_volume();
        self.values.iter().map(|v| w * v.iter().sum::<f64>()).collect()
    }

    /// `⟨μ, V(t_k)⟩` for a weight vector.
    pub fn pair(&self, k: usize, mu: &[f64]) -> f64 {
        dot(&self.values[k], mu)
    }

    fn same_mesh(&self, o: &FieldSolution) -> Result<()> {
        if self.grid != o.grid || self.dt != o.dt || self.times.len() != o.times.len() {
            return Err(Error::MeshMismatch(format!(
                "{:?} and {:?} live on different meshes",
                self.label, o.label
            )));
        }
        Ok(())
    }

    /// Little-endian f64 records, one per stored time.
    pub fn write_records<W: std::io::Write>(&self, w: W) -> Result<()> {
        NoisePath {
            grid: self.grid.clone(),
            dt: self.dt,
            increments: self.values.clone(),
        }
        .write_records(w)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `φ` sampled at the cell centers.
pub fn grid_values(phi: &TestFunction, grid: &GridSpec) -> Vec<f64> {
    (0..grid.n_cells()).map(|i| phi.eval(&grid.center(i))).collect()
}

/// `⟨λ_grid, φ⟩ = h^d Σ φ(x_i)`.
pub fn grid_mass(phi: &TestFunction, grid: &GridSpec) -> f64 {
    grid.cell_volume() * grid_values(phi, grid).iter().sum::<f64>()
}

/// Zero-flux `(2d+1)`-point Laplacian.
pub fn laplacian(grid: &GridSpec, v: &[f64], out: &mut [f64]) {
    let m = grid.cells_per_axis;
    let inv_h2 = 1.0 / (grid.h() * grid.h());
    out.iter_mut().for_each(|o| *o = 0.0);
    if m == 1 {
        return;
    }
    for k in 0..grid.dim {
        let s = grid.stride(k);
        for (i, o) in out.iter_mut().enumerate() {
            let c = (i / s) % m;
            let vi = v[i];
            let left = if c > 0 { v[i - s] } else { vi };
            let right = if c + 1 < m { v[i + s] } else { vi };
            *o += (left - vi) + (right - vi);
        }
    }
    out.iter_mut().for_each(|o| *o *= inv_h2);
}

/// Errors unless `dt ≤ c_stab h² / d`.
pub fn check_cfl(grid: &GridSpec, dt: f64, c_stab: f64) -> Result<()> {
    let limit = c_stab * grid.h() * grid.h() / grid.dim as f64;
    if dt > limit * (1.0 + 1e-12) {
        return Err(Error::Cfl { dt, limit });
    }
    Ok(())
}

/// The increments a solver sees, in the order it sees them.
fn ordered<'a>(path: &'a NoisePath, steps: usize, order: NoiseOrder) -> Result<Vec<&'a [f64]>> {
    if path.steps() < steps {
        return Err(Error::MeshMismatch(format!(
            "noise path has {} steps, {} needed",
            path.steps(),
            steps
        )));
    }
    Ok(match order {
        NoiseOrder::Forward => path.increments[..steps].iter().map(|v| v.as_slice()).collect(),
        NoiseOrder::Reversed => path.increments[..steps]
            .iter()
            .rev()
            .map(|v| v.as_slice())
            .collect(),
    })
}

fn check_overflow(v: &[f64], t: f64) -> Result<()> {
    if let Some(x) = v.iter().find(|x| !x.is_finite() || x.abs() > 1e150) {
        return Err(Error::Overflow {
            time: t,
            detail: format!("cell value {x}; the noise is too strong for this grid and step"),
        });
    }
    Ok(())
}

/// General stepping loop. `source(step, v, out)` adds the non-noise forcing.
fn evolve<F>(
    grid: &GridSpec,
    dt: f64,
    incs: &[&[f64]],
    opts: &SolverOptions,
    label: SolutionLabel,
    mut source: F,
) -> Result<FieldSolution>
where
    F: FnMut(usize, &[f64], &mut [f64]),
{
    check_cfl(grid, dt, opts.c_stab)?;
    let n = grid.n_cells();
    let mut v = vec![0.0; n];
    let mut lap = vec![0.0; n];
    let mut src = vec![0.0; n];
    let mut times = vec![0.0];
    let mut values = vec![v.clone()];
    for (j, inc) in incs.iter().enumerate() {
        if inc.len() != n {
            return Err(Error::MeshMismatch(format!("increment has {} cells, grid has {n}", inc.len())));
        }
        laplacian(grid, &v, &mut lap);
        src.iter_mut().for_each(|s| *s = 0.0);
        source(j, &v, &mut src);
        for i in 0..n {
            v[i] += dt * (0.5 * lap[i] + src[i]) + v[i] * inc[i];
        }
        let t = (j + 1) as f64 * dt;
        check_overflow(&v, t)?;
        if opts.store == StorePolicy::EveryStep || j + 1 == incs.len() {
            if opts.store == StorePolicy::Final {
                times.clear();
                values.clear();
            }
            times.push(t);
            values.push(v.clone());
        }
    }
    Ok(FieldSolution {
        grid: grid.clone(),
        dt,
        times,
        values,
        label,
    })
}

/// Linear equation with a given grid forcing, `∂V = f + ½ΔV + V Ẇ`.
pub fn solve_v1_forcing(
    forcing: &[f64],
    path: &NoisePath,
    horizon: f64,
    order: NoiseOrder,
    opts: &SolverOptions,
) -> Result<FieldSolution> {
    let steps = steps_for(horizon, path.dt)?;
    let incs = ordered(path, steps, order)?;
    evolve(&path.grid, path.dt, &incs, opts, SolutionLabel::V1, |_, _, out| {
        out.copy_from_slice(forcing)
    })
}

/// `V_1^φ` on the noise path.
pub fn solve_v1(phi: &TestFunction, path: &NoisePath, horizon: f64, order: NoiseOrder, opts: &SolverOptions) -> Result<FieldSolution> {
    solve_v1_forcing(&grid_values(phi, &path.grid), path, horizon, order, opts)
}

/// Nonlinear equation `∂U = f + ½ΔU - ½U² + U Ẇ` with grid forcing `f`.
pub fn solve_u_forcing(
    forcing: &[f64],
    path: &NoisePath,
    horizon: f64,
    order: NoiseOrder,
    opts: &SolverOptions,
) -> Result<FieldSolution> {
    let steps = steps_for(horizon, path.dt)?;
    let incs = ordered(path, steps, order)?;
    evolve(&path.grid, path.dt, &incs, opts, SolutionLabel::U, |_, v, out| {
        for i in 0..out.len() {
            out[i] = forcing[i] - 0.5 * v[i] * v[i];
        }
    })
}

/// `U^{θφ}` on the noise path.
pub fn solve_u(phi: &TestFunction, theta: f64, path: &NoisePath, horizon: f64, order: NoiseOrder, opts: &SolverOptions) -> Result<FieldSolution> {
    let f: Vec<f64> = grid_values(phi, &path.grid).into_iter().map(|v| theta * v).collect();
    solve_u_forcing(&f, path, horizon, order, opts)
}

/// `u_T = √T U^{T^{-1/2} φ}` and `v_T = V_1 - u_T`, on the mesh of `v1`.
pub fn solve_ut_vt(
    phi: &TestFunction,
    v1: &FieldSolution,
    path: &NoisePath,
    horizon: f64,
    order: NoiseOrder,
    opts: &SolverOptions,
) -> Result<(FieldSolution, FieldSolution)> {
    let s = horizon.sqrt();
    let mut ut = solve_u(phi, 1.0 / s, path, horizon, order, opts)?;
    ut.same_mesh(v1)?;
    ut.values.iter_mut().for_each(|v| v.iter_mut().for_each(|x| *x *= s));
    ut.label = SolutionLabel::UT;
    let vt_vals = v1
        .values
        .iter()
        .zip(&ut.values)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
        .collect();
    let vt = FieldSolution {
        values: vt_vals,
        label: SolutionLabel::VT,
        ..ut.clone()
    };
    Ok((ut, vt))
}

/// Quenched mean `E^W[Y_t(φ) | X_0 = δ_x]` at each requested time, for a
/// particle system that reads `path` forward.
///
/// Each time is solved separately on the reversed prefix of the path. The
/// result is nondecreasing in `t` cellwise whenever the explicit step is
/// positivity preserving.
pub fn quenched_v1(phi: &TestFunction, path: &NoisePath, times: &[f64], opts: &SolverOptions) -> Result<FieldSolution> {
    let forcing = grid_values(phi, &path.grid);
    let final_only = SolverOptions {
        store: StorePolicy::Final,
        ..*opts
    };
    let mut values = Vec::with_capacity(times.len());
    for &t in times {
        let s = solve_v1_forcing(&forcing, path, t, NoiseOrder::Reversed, &final_only)?;
        values.push(s.last().to_vec());
    }
    Ok(FieldSolution {
        grid: path.grid.clone(),
        dt: path.dt,
        times: times.to_vec(),
        values,
        label: SolutionLabel::V1,
    })
}

/// A scalar functional of a solution at every stored time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl Trace {
    pub fn last(&self) -> f64 {
        *self.values.last().expect("nonempty trace")
    }

    pub fn is_nondecreasing(&self) -> bool {
        self.values.windows(2).all(|w| w[1] >= w[0])
    }

    /// `(f(t_max) - f(3 t_max / 4)) / f(t_max)`, interpolating linearly.
    pub fn last_quarter_fraction(&self) -> f64 {
        let t = *self.times.last().expect("nonempty trace");
        let f = self.at(0.75 * t);
        (self.last() - f) / self.last()
    }

    /// Linear interpolation.
    pub fn at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s < t);
        if k == 0 {
            return self.values[0];
        }
        if k >= self.times.len() {
            return self.last();
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let w = (t - t0) / (t1 - t0);
        self.values[k - 1] * (1.0 - w) + self.values[k] * w
    }
}

/// `σ² = h^d Σ V_1(t)²` at every stored time; the estimate is the last entry.
pub fn sigma_sq(v1: &FieldSolution) -> Trace {
    let w = v1.grid.cell_volume();
    Trace {
        times: v1.times.clone(),
        values: v1.values.iter().map(|v| w * dot(v, v)).collect(),
    }
}

/// `ξ = h^{2d} Σ_ij V_1(t)_i V_1(t)_j g(x_i, x_j)` at every stored time.
pub fn xi_estimate(v1: &FieldSolution, factor: &FieldFactor) -> Trace {
    let w = v1.grid.cell_volume();
    Trace {
        times: v1.times.clone(),
        values: v1.values.iter().map(|v| w * w * factor.quad_form(v)).collect(),
    }
}

/// The three terms of the CLT decomposition and the left-hand side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CltDecomposition {
    pub i1: f64,
    pub i2: f64,
    pub i3: f64,
    pub lhs: f64,
}

impl CltDecomposition {
    /// `|lhs - (I1 - I2 + I3)| / (|I1| + |I2| + |I3| + |lhs|)`.
    pub fn relative_residual(&self) -> f64 {
        let scale = self.i1.abs() + self.i2.abs() + self.i3.abs() + self.lhs.abs();
        if scale == 0.0 {
            return 0.0;
        }
        (self.lhs - (self.i1 - self.i2 + self.i3)).abs() / scale
    }
}

/// Discrete `I_1, I_2, I_3` and `T^{-1/2} ⟨λ_grid, v_T(T)⟩`.
pub fn clt_decomposition(
    v1: &FieldSolution,
    ut: &FieldSolution,
    vt: &FieldSolution,
    path: &NoisePath,
    horizon: f64,
    order: NoiseOrder,
) -> Result<CltDecomposition> {
    v1.same_mesh(ut)?;
    v1.same_mesh(vt)?;
    let steps = steps_for(horizon, v1.dt)?;
    if v1.values.len() != steps + 1 {
        return Err(Error::MeshMismatch("solutions must store every step up to the horizon".into()));
    }
    let incs = ordered(path, steps, order)?;
    let w = v1.grid.cell_volume();
    let dt = v1.dt;
    let (mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0);
    for j in 0..steps {
        let (a, b, c) = (&v1.values[j], &ut.values[j], &vt.values[j]);
        s1 += dt * w * dot(a, a);
        s2 += dt * w * a.iter().zip(b).map(|(x, y)| x * x - y * y).sum::<f64>();
        s3 += w * dot(c, incs[j]);
    }
    let rt = horizon.sqrt();
    Ok(CltDecomposition {
        i1: s1 / (2.0 * horizon),
        i2: s2 / (2.0 * horizon),
        i3: s3 / rt,
        lhs: w * vt.last().iter().sum::<f64>() / rt,
    })
}

/// The martingale `N(t) = ⟨λ, V_1(t)⟩ - t ⟨λ, φ⟩` computed two ways, and its
/// quadratic variation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleStat {
    pub times: Vec<f64>,
    /// `Σ_{s<t} h^d ⟨V_1(s), ΔW(s)⟩`.
    pub n_path: Vec<f64>,
    /// `h^d Σ V_1(t) - t ⟨λ_grid, φ⟩`.
    pub n_direct: Vec<f64>,
    /// `Σ_{s<t} Δt h^{2d} V_1(s)ᵀ G V_1(s)`.
    pub qv_path: Vec<f64>,
    /// `max_t h^d Σ V_1(t)`, the size of the terms cancelling in `n_direct`.
    pub mass_scale: f64,
}

impl MartingaleStat {
    /// Largest gap between the two computations of `N`, relative to the
    /// larger of `max |N|` and the mass scale.
    pub fn identity_residual(&self) -> f64 {
        let scale = self
            .n_path
            .iter()
            .zip(&self.n_direct)
            .map(|(a, b)| a.abs().max(b.abs()))
            .fold(self.mass_scale, f64::max);
        if scale == 0.0 {
            return 0.0;
        }
        self.n_path
            .iter()
            .zip(&self.n_direct)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / scale
    }
}

pub fn martingale_stat(
    v1: &FieldSolution,
    phi: &TestFunction,
    path: &NoisePath,
    factor: &FieldFactor,
    order: NoiseOrder,
) -> Result<MartingaleStat> {
    let steps = v1.values.len() - 1;
    if (v1.t_max() - steps as f64 * v1.dt).abs() > 1e-9 * v1.t_max().max(1.0) {
        return Err(Error::MeshMismatch("solution must store every step".into()));
    }
    let incs = ordered(path, steps, order)?;
    let w = v1.grid.cell_volume();
    let lam_phi = grid_mass(phi, &v1.grid);
    let mut n_path = vec![0.0];
    let mut qv = vec![0.0];
    let (mut n, mut q) = (0.0, 0.0);
    for j in 0..steps {
        n += w * dot(&v1.values[j], incs[j]);
        q += v1.dt * w * w * factor.quad_form(&v1.values[j]);
        n_path.push(n);
        qv.push(q);
    }
    let masses = v1.masses();
    let mass_scale = masses.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let n_direct = masses
        .iter()
        .zip(&v1.times)
        .map(|(m, t)| m - t * lam_phi)
        .collect();
    Ok(MartingaleStat {
        times: v1.times.clone(),
        n_path,
        n_direct,
        qv_path: qv,
        mass_scale,
    })
}

/// `V_2, ..., V_{n_max}` and the conditional moments `L^{(n)}`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentRecursion {
    /// `v[k]` is `V_{k+1}`.
    pub v: Vec<FieldSolution>,
    /// `l[n][time]` is `L^{(n)}_t`.
    pub l: Vec<Vec<f64>>,
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

pub fn solve_v2_and_moments(
    v1: &FieldSolution,
    path: &NoisePath,
    order: NoiseOrder,
    mu: &[f64],
    n_max: usize,
    opts: &SolverOptions,
) -> Result<MomentRecursion> {
    if !(1..=4).contains(&n_max) {
        return Err(Error::param("n_max", "must be in 1..=4"));
    }
    let steps = v1.values.len() - 1;
    let incs = ordered(path, steps, order)?;
    let mut v = vec![v1.clone()];
    for n in 2..=n_max {
        let prev = v.clone();
        let sol = evolve(&v1.grid, v1.dt, &incs, &SolverOptions { store: StorePolicy::EveryStep, ..*opts }, SolutionLabel::V(n as u8), |j, _, out| {
            for k in 1..n {
                let c = binom(n - 1, k);
                let a = &prev[n - k - 1].values[j];
                let b = &prev[k - 1].values[j];
                for i in 0..out.len() {
                    out[i] += c * a[i] * b[i];
                }
            }
        })?;
        v.push(sol);
    }
    let times = v1.values.len();
    let mut l = vec![vec![1.0; times]];
    for n in 1..=n_max {
        let row = (0..times)
            .map(|t| {
                (0..n)
                    .map(|k| binom(n - 1, k) * v[n - k - 1].pair(t, mu) * l[k][t])
                    .sum()
            })
            .collect();
        l.push(row);
    }
    Ok(MomentRecursion { v, l })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{EnvironmentField, HistoryPolicy};
    use crate::kernels::{CorrelationKernel, KernelKind};
    use crate::testfn::TestFnKind;

    fn setup(eps: f64) -> (TestFunction, NoisePath, FieldFactor) {
        let g = GridSpec::new(3, 2.0, 8).unwrap();
        let k = if eps == 0.0 {
            CorrelationKernel::zero(3)
        } else {
            CorrelationKernel::new(KernelKind::CauchyPD, eps, 3.0, 3).unwrap()
        };
        let mut f = EnvironmentField::build(g, k, 11, 0.05, 4096).unwrap();
        f.history_policy = HistoryPolicy::KeepLast;
        let p = f.record(40);
        let phi = TestFunction::centered(TestFnKind::Bump, 3, 1.0, 1.0).unwrap();
        (phi, p, (*f.factor).clone())
    }

    #[test]
    fn laplacian_conserves_mass() {
        let g = GridSpec::new(3, 1.0, 5).unwrap();
        let v: Vec<f64> = (0..125).map(|i| ((i * 31) % 17) as f64).collect();
        let mut out = vec![0.0; 125];
        laplacian(&g, &v, &mut out);
        assert!(out.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn cfl_violation_is_rejected_before_stepping() {
        let g = GridSpec::new(3, 1.0, 16).unwrap();
        let p = NoisePath::zero(g, 0.1, 10);
        let phi = TestFunction::centered(TestFnKind::Bump, 3, 0.5, 1.0).unwrap();
        let r = solve_v1(&phi, &p, 1.0, NoiseOrder::Forward, &SolverOptions::default());
        assert!(matches!(r, Err(Error::Cfl { .. })));
    }

    #[test]
    fn identities_hold_on_a_noisy_path() {
        let (phi, p, f) = setup(0.05);
        let o = SolverOptions::default();
        let v1 = solve_v1(&phi, &p, 2.0, NoiseOrder::Forward, &o).unwrap();
        let (ut, vt) = solve_ut_vt(&phi, &v1, &p, 2.0, NoiseOrder::Forward, &o).unwrap();
        let c = clt_decomposition(&v1, &ut, &vt, &p, 2.0, NoiseOrder::Forward).unwrap();
        assert!(c.relative_residual() < 1e-10, "{c:?}");
        assert!(c.i1 >= c.i2 && c.i2 >= 0.0);
        let m = martingale_stat(&v1, &phi, &p, &f, NoiseOrder::Forward).unwrap();
        assert!(m.identity_residual() < 1e-10);
    }

    #[test]
    fn zero_kernel_has_no_stochastic_terms() {
        let (phi, p, f) = setup(0.0);
        let o = SolverOptions::default();
        let v1 = solve_v1(&phi, &p, 2.0, NoiseOrder::Forward, &o).unwrap();
        let (ut, vt) = solve_ut_vt(&phi, &v1, &p, 2.0, NoiseOrder::Forward, &o).unwrap();
        let c = clt_decomposition(&v1, &ut, &vt, &p, 2.0, NoiseOrder::Forward).unwrap();
        assert_eq!(c.i3, 0.0);
        let m = martingale_stat(&v1, &phi, &p, &f, NoiseOrder::Forward).unwrap();
        assert!(m.n_path.iter().all(|&x| x == 0.0));
        assert!(m.qv_path.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linearity_in_phi() {
        let (phi, p, _) = setup(0.05);
        let o = SolverOptions::default();
        let mut phi3 = phi.clone();
        phi3.amplitude *= 3.0;
        let a = solve_v1(&phi, &p, 2.0, NoiseOrder::Forward, &o).unwrap();
        let b = solve_v1(&phi3, &p, 2.0, NoiseOrder::Forward, &o).unwrap();
        for (x, y) in a.last().iter().zip(b.last()) {
            assert!((3.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-300));
        }
    }

    #[test]
    fn quenched_traces_are_monotone() {
        let (phi, p, f) = setup(0.05);
        let times: Vec<f64> = (0..=8).map(|k| k as f64 * 0.25).collect();
        let q = quenched_v1(&phi, &p, &times, &SolverOptions::default()).unwrap();
        for w in q.values.windows(2) {
            assert!(w[0].iter().zip(&w[1]).all(|(a, b)| b >= a));
        }
        assert!(sigma_sq(&q).is_nondecreasing());
        assert!(xi_estimate(&q, &f).is_nondecreasing());
    }

    #[test]
    fn second_moment_recursion() {
        let (phi, p, _) = setup(0.05);
        let o = SolverOptions::default();
        let v1 = solve_v1(&phi, &p, 1.0, NoiseOrder::Reversed, &o).unwrap();
        let mu = vec![p.grid.cell_volume(); p.grid.n_cells()];
        let m = solve_v2_and_moments(&v1, &p, NoiseOrder::Reversed, &mu, 3, &o).unwrap();
        let last = v1.values.len() - 1;
        let l1 = v1.pair(last, &mu);
        let l2 = m.v[1].pair(last, &mu) + l1 * l1;
        assert_eq!(m.l[0][last], 1.0);
        assert!((m.l[1][last] - l1).abs() < 1e-14 * l1);
        assert!((m.l[2][last] - l2).abs() < 1e-12 * l2);
    }
}
