//! Branching Brownian particle approximation of the superprocess and its
//! occupation measure.
//!
//! Level `n` uses time step `Δt = 1/n` and particle mass `1/n`. In each step
//! every particle takes a Gaussian move with per-coordinate variance `Δt`,
//! then splits in two with probability `(1 + θ)/2` or dies, where `θ` is the
//! clipped environment increment of the cell it landed in.

use crate::environment::{value_at, GridSpec, NoisePath};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::testfn::TestFunction;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

pub const DEFAULT_MAX_PARTICLES: usize = 5_000_000;

/// What happens to particles at the box boundary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryPolicy {
    /// Particles leave the box and keep diffusing with `θ = 0`.
    #[default]
    Free,
    /// Particles are reflected back into the box, matching the zero-flux
    /// boundary of the grid solvers.
    Reflect,
}

/// Weighted point cloud `X_t = (1/n) Σ δ_{x_i}`.
#[derive(Clone, Debug)]
pub struct ParticleCloud {
    pub dim: usize,
    /// Flat coordinates, `dim` per particle.
    pub positions: Vec<f64>,
    pub mass: f64,
    pub time: f64,
    pub n: usize,
    pub steps: usize,
    pub max_particles: usize,
    stream: Stream,
}

impl ParticleCloud {
    /// Cloud with explicit positions (mass `1/n`).
    pub fn from_positions(dim: usize, positions: Vec<f64>, n: usize, seed: u64, max_particles: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::param("sim.n", "must be at least 1"));
        }
        if positions.len() % dim != 0 {
            return Err(Error::param("positions", "length is not a multiple of dim"));
        }
        Ok(ParticleCloud {
            dim,
            positions,
            mass: 1.0 / n as f64,
            time: 0.0,
            n,
            steps: 0,
            max_particles,
            stream: rng::stream(seed, 1),
        })
    }

    pub fn count(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn dt(&self) -> f64 {
        self.mass
    }

    /// `X_t(1)`.
    pub fn total_mass(&self) -> f64 {
        self.mass * self.count() as f64
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    /// `X_t(φ) = mass · Σ φ(x_i)`.
    pub fn measure(&self, phi: &TestFunction) -> f64 {
        self.mass
            * self
                .positions
                .chunks_exact(self.dim)
                .map(|x| phi.eval(x))
                .sum::<f64>()
    }

    /// One move-then-branch step driven by `increment`.
    pub fn step(&mut self, increment: &[f64], grid: &GridSpec, boundary: BoundaryPolicy) -> Result<()> {
        if increment.len() != grid.n_cells() {
            return Err(Error::MeshMismatch(format!(
                "increment has {} cells, grid has {}",
                increment.len(),
                grid.n_cells()
            )));
        }
        let d = self.dim;
        let sd = self.dt().sqrt();
        let l = grid.half_width;
        let mut next = Vec::with_capacity(self.positions.len() + self.positions.len() / 8);
        let mut x = vec![0.0; d];
        for p in self.positions.chunks_exact(d) {
            for k in 0..d {
                let z: f64 = StandardNormal.sample(&mut self.stream);
                let mut c = p[k] + sd * z;
                if boundary == BoundaryPolicy::Reflect {
                    c = reflect(c, l);
                }
                x[k] = c;
            }
            let theta = value_at(increment, grid, &x).clamp(-1.0, 1.0);
            let u: f64 = self.stream.random();
            if u < 0.5 * (1.0 + theta) {
                next.extend_from_slice(&x);
                next.extend_from_slice(&x);
            }
        }
        self.positions = next;
        self.steps += 1;
        self.time = self.steps as f64 * self.dt();
        if self.count() > self.max_particles {
            return Err(Error::PopulationCap {
                count: self.count(),
                cap: self.max_particles,
                time: self.time,
            });
        }
        Ok(())
    }
}

/// Folds `c` into `[-l, l]` by mirror reflection.
fn reflect(c: f64, l: f64) -> f64 {
    if c.abs() <= l {
        return c;
    }
    let period = 4.0 * l;
    let mut u = (c + l).rem_euclid(period);
    if u > 2.0 * l {
        u = period - u;
    }
    u - l
}

/// Poisson(`n (2L)^d`) particles placed uniformly on the box.
pub fn init_cloud(n: usize, grid: &GridSpec, seed: u64, max_particles: usize) -> Result<ParticleCloud> {
    if n == 0 {
        return Err(Error::param("sim.n", "must be at least 1"));
    }
    let mean = n as f64 * grid.box_volume();
    if mean > max_particles as f64 {
        return Err(Error::PopulationCap {
            count: mean.ceil() as usize,
            cap: max_particles,
            time: 0.0,
        });
    }
    let mut s = rng::stream(seed, 0);
    let count = Poisson::new(mean)
        .map(|p| p.sample(&mut s) as usize)
        .map_err(|e| Error::param("sim.n", e.to_string()))?;
    let l = grid.half_width;
    let positions = (0..count * grid.dim)
        .map(|_| s.random_range(-l..l))
        .collect();
    ParticleCloud::from_positions(grid.dim, positions, n, seed, max_particles)
}

/// Left-endpoint Riemann sums `Y_t(φ_j) = Σ X_s(φ_j) Δt`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupationAccumulator {
    pub test_functions: Vec<TestFunction>,
    pub partial_sums: Vec<f64>,
}

impl OccupationAccumulator {
    pub fn new(test_functions: Vec<TestFunction>) -> Self {
        let k = test_functions.len();
        OccupationAccumulator {
            test_functions,
            partial_sums: vec![0.0; k],
        }
    }

    /// Adds `X_s(φ_j) Δt` for every `j`; returns the `X_s(φ_j)`.
    pub fn accumulate(&mut self, cloud: &ParticleCloud, dt: f64) -> Vec<f64> {
        let xs: Vec<f64> = self.test_functions.iter().map(|f| cloud.measure(f)).collect();
        for (s, x) in self.partial_sums.iter_mut().zip(&xs) {
            *s += x * dt;
        }
        xs
    }

    /// Adds a given value of `X_s(φ_j)`; used to test the accumulator alone.
    pub fn accumulate_value(&mut self, j: usize, value: f64, dt: f64) {
        self.partial_sums[j] += value * dt;
    }
}

/// One row of the snapshot output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    pub phi_id: usize,
    pub x_phi: f64,
    pub y_phi: f64,
}

#[derive(Clone, Debug)]
pub struct OccupationRun {
    pub accumulator: OccupationAccumulator,
    pub snapshots: Vec<Snapshot>,
    pub final_mass: f64,
    pub peak_count: usize,
}

impl OccupationRun {
    pub fn y(&self, j: usize) -> f64 {
        self.accumulator.partial_sums[j]
    }
}

/// Number of steps of length `dt` in `t`, if `t` is a multiple of `dt`.
pub fn steps_for(t: f64, dt: f64) -> Result<usize> {
    let k = (t / dt).round();
    if !(k >= 0.0) || (k * dt - t).abs() > 1e-9 * t.max(1.0) {
        return Err(Error::param("sim.T", format!("T = {t} is not a multiple of dt = {dt}")));
    }
    Ok(k as usize)
}

/// Runs the cloud to `horizon` on the recorded noise, accumulating `Y_t(φ_j)`
/// and recording `(X_t(φ_j), Y_t(φ_j))` at each snapshot time.
pub fn run_occupation(
    cloud: &mut ParticleCloud,
    path: &NoisePath,
    horizon: f64,
    phis: &[TestFunction],
    snapshot_times: &[f64],
    boundary: BoundaryPolicy,
) -> Result<OccupationRun> {
    let dt = cloud.dt();
    if (path.dt - dt).abs() > 1e-12 * dt {
        return Err(Error::MeshMismatch(format!(
            "noise step {} differs from particle step 1/n = {}",
            path.dt, dt
        )));
    }
    let steps = steps_for(horizon, dt)?;
    if path.steps() < steps {
        return Err(Error::MeshMismatch(format!(
            "noise path has {} steps, {} needed",
            path.steps(),
            steps
        )));
    }
    let snap_steps: Vec<usize> = snapshot_times
        .iter()
        .map(|&t| steps_for(t, dt))
        .collect::<Result<_>>()?;
    let mut acc = OccupationAccumulator::new(phis.to_vec());
    let mut snapshots = Vec::new();
    let mut peak = cloud.count();
    let push = |k: usize, xs: &[f64], ys: &[f64], snaps: &mut Vec<Snapshot>| {
        if snap_steps.contains(&k) {
            for (j, (&x, &y)) in xs.iter().zip(ys).enumerate() {
                snaps.push(Snapshot {
                    t: k as f64 * dt,
                    phi_id: j,
                    x_phi: x,
                    y_phi: y,
                });
            }
        }
    };
    for k in 0..steps {
        let ys = acc.partial_sums.clone();
        let xs = acc.accumulate(cloud, dt);
        push(k, &xs, &ys, &mut snapshots);
        cloud.step(&path.increments[k], &path.grid, boundary)?;
        peak = peak.max(cloud.count());
    }
    let xs: Vec<f64> = phis.iter().map(|f| cloud.measure(f)).collect();
    push(steps, &xs, &acc.partial_sums, &mut snapshots);
    Ok(OccupationRun {
        accumulator: acc,
        snapshots,
        final_mass: cloud.total_mass(),
        peak_count: peak,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testfn::TestFnKind;

    #[test]
    fn reflection_folds_into_box() {
        assert_eq!(reflect(0.3, 1.0), 0.3);
        assert!((reflect(1.2, 1.0) - 0.8).abs() < 1e-15);
        assert!((reflect(-1.5, 1.0) + 0.5).abs() < 1e-15);
        assert!((reflect(3.5, 1.0) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn measure_matches_enumeration() {
        let phi = TestFunction::centered(TestFnKind::Bump, 3, 1.0, 2.0).unwrap();
        let pos: Vec<f64> = (0..30).map(|i| ((i * 37 % 19) as f64 - 9.0) / 12.0).collect();
        let c = ParticleCloud::from_positions(3, pos.clone(), 4, 1, 100).unwrap();
        let brute: f64 = pos.chunks(3).map(|x| phi.eval(x)).sum::<f64>() * 0.25;
        assert!((c.measure(&phi) - brute).abs() < 1e-15);
        let empty = ParticleCloud::from_positions(3, vec![], 4, 1, 100).unwrap();
        assert_eq!(empty.measure(&phi), 0.0);
        let one = ParticleCloud::from_positions(3, vec![0.0; 3], 4, 1, 100).unwrap();
        assert_eq!(one.measure(&phi), 0.25 * 2.0);
    }

    #[test]
    fn frozen_accumulator_integrates_constant() {
        let phi = TestFunction::centered(TestFnKind::Bump, 3, 1.0, 1.0).unwrap();
        let mut acc = OccupationAccumulator::new(vec![phi]);
        for _ in 0..40 {
            acc.accumulate_value(0, 0.75, 0.05);
        }
        assert!((acc.partial_sums[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn cap_is_enforced() {
        let g = GridSpec::new(3, 1.0, 2).unwrap();
        assert!(matches!(init_cloud(100, &g, 1, 10), Err(Error::PopulationCap { .. })));
        let c = init_cloud(100, &g, 1, 10_000).unwrap();
        assert_eq!(c.mass, 0.01);
        assert!(c.positions.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn horizon_must_be_a_step_multiple() {
        assert_eq!(steps_for(1.0, 0.1).unwrap(), 10);
        assert!(steps_for(1.05, 0.1).is_err());
    }
}
