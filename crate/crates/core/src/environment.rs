//! Grid realizations of the white-in-time, spatially colored Gaussian noise.

use crate::error::{Error, Result};
use crate::kernels::{CorrelationKernel, KernelKind};
use crate::rng::{self, Stream};
use faer::{Mat, Side};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::sync::Arc;

pub const DEFAULT_MAX_CELLS: usize = 4096;

/// Regular lattice of `m^d` cells covering `[-L, L]^d`.
///
/// Cells are numbered row-major: the first axis varies slowest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub half_width: f64,
    pub cells_per_axis: usize,
}

impl GridSpec {
    pub fn new(dim: usize, half_width: f64, cells_per_axis: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("dim", "must be positive"));
        }
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(Error::param("grid.L", format!("must be positive, got {half_width}")));
        }
        if cells_per_axis == 0 {
            return Err(Error::param("grid.m", "must be positive"));
        }
        cells_per_axis
            .checked_pow(dim as u32)
            .ok_or_else(|| Error::param("grid.m", "m^d overflows"))?;
        Ok(GridSpec {
            dim,
            half_width,
            cells_per_axis,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.cells_per_axis.pow(self.dim as u32)
    }

    /// Cell width `h = 2L/m`.
    pub fn h(&self) -> f64 {
        2.0 * self.half_width / self.cells_per_axis as f64
    }

    /// Cell volume `h^d`.
    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.dim as i32)
    }

    pub fn box_volume(&self) -> f64 {
        (2.0 * self.half_width).powi(self.dim as i32)
    }

    /// Errors if the grid exceeds `cap` cells.
    pub fn check_cap(&self, cap: usize) -> Result<()> {
        if self.n_cells() > cap {
            return Err(Error::GridTooLarge {
                cells: self.n_cells(),
                cap,
            });
        }
        Ok(())
    }

    /// Coordinate of the center of cell `k` along one axis.
    pub fn axis_center(&self, k: usize) -> f64 {
        -self.half_width + (k as f64 + 0.5) * self.h()
    }

    pub fn multi_index(&self, mut i: usize) -> Vec<usize> {
        let m = self.cells_per_axis;
        let mut idx = vec![0; self.dim];
        for k in (0..self.dim).rev() {
            idx[k] = i % m;
            i /= m;
        }
        idx
    }

    pub fn center(&self, i: usize) -> Vec<f64> {
        self.multi_index(i)
            .into_iter()
            .map(|k| self.axis_center(k))
            .collect()
    }

    pub fn centers(&self) -> Vec<Vec<f64>> {
        (0..self.n_cells()).map(|i| self.center(i)).collect()
    }

    /// Index of the cell containing `x`, or `None` outside the closed box.
    pub fn cell_of(&self, x: &[f64]) -> Option<usize> {
        let m = self.cells_per_axis;
        let inv_h = 1.0 / self.h();
        let mut idx = 0usize;
        for &c in x {
            let u = (c + self.half_width) * inv_h;
            if !(u >= 0.0 && u <= m as f64) {
                return None;
            }
            idx = idx * m + (u as usize).min(m - 1);
        }
        Some(idx)
    }

    /// Row-major stride of axis `k`.
    pub fn stride(&self, k: usize) -> usize {
        self.cells_per_axis.pow((self.dim - 1 - k) as u32)
    }
}

/// Increment of the cell containing `x`; zero outside the box.
pub fn value_at(increment: &[f64], grid: &GridSpec, x: &[f64]) -> f64 {
    grid.cell_of(x).map_or(0.0, |i| increment[i])
}

/// How the factor was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FactorMethod {
    Zero,
    Cholesky,
    EigenClipped,
    Kronecker,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorDiagnostics {
    pub method: FactorMethod,
    /// Diagonal jitter that made the Cholesky factorization succeed.
    pub jitter: f64,
    /// Spectral mass removed by clipping, relative to the trace.
    pub distortion: f64,
    /// `‖F Fᵀ - G‖_F / ‖G‖_F` where checked.
    pub reconstruction_error: f64,
}

/// Square root `F` of the cell Gram matrix, `F Fᵀ = G`.
#[derive(Clone, Debug)]
pub enum FieldFactor {
    Zero { n: usize },
    Dense { gram: Mat<f64>, factor: Mat<f64> },
    /// `G = ε G₁ ⊗ ... ⊗ G₁` with `G₁ = L₁ L₁ᵀ` on one axis.
    Kronecker {
        epsilon: f64,
        dim: usize,
        axis_gram: Mat<f64>,
        axis_factor: Mat<f64>,
    },
}

impl FieldFactor {
    pub fn n_cells(&self) -> usize {
        match self {
            FieldFactor::Zero { n } => *n,
            FieldFactor::Dense { gram, .. } => gram.nrows(),
            FieldFactor::Kronecker { dim, axis_gram, .. } => axis_gram.nrows().pow(*dim as u32),
        }
    }

    /// `vᵀ G v`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        self.bilinear(v, v)
    }

    /// `uᵀ G v`.
    pub fn bilinear(&self, u: &[f64], v: &[f64]) -> f64 {
        match self {
            FieldFactor::Zero { .. } => 0.0,
            FieldFactor::Dense { gram, .. } => {
                let n = gram.nrows();
                let mut s = 0.0;
                for j in 0..n {
                    let col = gram.col(j);
                    let mut c = 0.0;
                    for i in 0..n {
                        c += col[i] * u[i];
                    }
                    s += c * v[j];
                }
                s
            }
            FieldFactor::Kronecker {
                epsilon,
                dim,
                axis_gram,
                ..
            } => {
                let gv = kron_apply(axis_gram, *dim, v);
                epsilon * u.iter().zip(&gv).map(|(a, b)| a * b).sum::<f64>()
            }
        }
    }

    /// `F Fᵀ` as a dense matrix (small grids only).
    pub fn reconstruct(&self) -> Mat<f64> {
        let n = self.n_cells();
        match self {
            FieldFactor::Zero { .. } => Mat::zeros(n, n),
            FieldFactor::Dense { factor, .. } => factor * factor.transpose(),
            FieldFactor::Kronecker { .. } => {
                let mut out = Mat::<f64>::zeros(n, n);
                let mut e = vec![0.0; n];
                for j in 0..n {
                    e.iter_mut().for_each(|v| *v = 0.0);
                    e[j] = 1.0;
                    let f = self.apply_factor_t_then_factor(&e);
                    for i in 0..n {
                        out[(i, j)] = f[i];
                    }
                }
                out
            }
        }
    }

    fn apply_factor_t_then_factor(&self, e: &[f64]) -> Vec<f64> {
        match self {
            FieldFactor::Kronecker {
                epsilon,
                dim,
                axis_factor,
                ..
            } => {
                let lt = axis_factor.transpose().to_owned();
                let a = kron_apply(&lt, *dim, e);
                kron_apply(axis_factor, *dim, &a)
                    .into_iter()
                    .map(|v| v * epsilon)
                    .collect()
            }
            _ => unreachable!(),
        }
    }

    /// Writes `F z_b` into column `b` of `out` for every column of `z`.
    fn apply(&self, z: &Mat<f64>) -> Mat<f64> {
        match self {
            FieldFactor::Zero { n } => Mat::zeros(*n, z.ncols()),
            FieldFactor::Dense { factor, .. } => factor * z,
            FieldFactor::Kronecker {
                epsilon,
                dim,
                axis_factor,
                ..
            } => {
                let n = z.nrows();
                let s = epsilon.sqrt();
                let mut out = Mat::<f64>::zeros(n, z.ncols());
                let mut col = vec![0.0; n];
                for b in 0..z.ncols() {
                    for i in 0..n {
                        col[i] = z[(i, b)];
                    }
                    let y = kron_apply(axis_factor, *dim, &col);
                    for i in 0..n {
                        out[(i, b)] = s * y[i];
                    }
                }
                out
            }
        }
    }
}

/// `(A ⊗ ... ⊗ A) v` for a row-major tensor with `dim` axes of length `A.nrows()`.
fn kron_apply(a: &Mat<f64>, dim: usize, v: &[f64]) -> Vec<f64> {
    let m = a.nrows();
    let mut cur = v.to_vec();
    let mut next = vec![0.0; v.len()];
    let mut fiber = vec![0.0; m];
    for k in 0..dim {
        let stride = m.pow((dim - 1 - k) as u32);
        let block = stride * m;
        for base in (0..v.len()).step_by(block) {
            for off in 0..stride {
                let start = base + off;
                for l in 0..m {
                    fiber[l] = cur[start + l * stride];
                }
                for j in 0..m {
                    let mut acc = 0.0;
                    for l in 0..m {
                        acc += a[(j, l)] * fiber[l];
                    }
                    next[start + j * stride] = acc;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Factorizes a symmetric positive semidefinite matrix.
///
/// Tries plain Cholesky, then diagonal jitter `10^{-12} s` up to
/// `10^{-6} s` (with `s` the mean diagonal), and finally clips the negative
/// eigenvalues. Clipping that removes more than 1% of the trace is an error.
pub fn factorize(gram: &Mat<f64>) -> Result<(Mat<f64>, FactorDiagnostics)> {
    let n = gram.nrows();
    let trace: f64 = (0..n).map(|i| gram[(i, i)]).sum();
    let scale = if n > 0 { trace / n as f64 } else { 0.0 };
    let mut jitter = 0.0;
    for step in 0..=6 {
        let attempt = if step == 0 {
            gram.clone()
        } else {
            jitter = scale * 10f64.powi(-13 + step);
            let mut g = gram.clone();
            for i in 0..n {
                g[(i, i)] += jitter;
            }
            g
        };
        if let Ok(llt) = attempt.llt(Side::Lower) {
            return Ok((
                llt.L().to_owned(),
                FactorDiagnostics {
                    method: FactorMethod::Cholesky,
                    jitter: if step == 0 { 0.0 } else { jitter },
                    distortion: 0.0,
                    reconstruction_error: f64::NAN,
                },
            ));
        }
    }
    let eig = gram
        .self_adjoint_eigen(Side::Lower)
        .map_err(|_| Error::Factorization { distortion: f64::NAN })?;
    let u = eig.U();
    let s = eig.S().column_vector();
    let removed: f64 = (0..n).map(|i| (-s[i]).max(0.0)).sum();
    let distortion = if trace > 0.0 { removed / trace } else { 0.0 };
    if distortion > 0.01 {
        return Err(Error::Factorization { distortion });
    }
    let f = Mat::<f64>::from_fn(n, n, |i, j| u[(i, j)] * s[j].max(0.0).sqrt());
    Ok((
        f,
        FactorDiagnostics {
            method: FactorMethod::EigenClipped,
            jitter: 0.0,
            distortion,
            reconstruction_error: f64::NAN,
        },
    ))
}

/// Builds the factor of the cell Gram matrix for `kernel` on `grid`.
pub fn build_factor(grid: &GridSpec, kernel: &CorrelationKernel) -> Result<(FieldFactor, FactorDiagnostics)> {
    let n = grid.n_cells();
    if kernel.is_zero() {
        return Ok((
            FieldFactor::Zero { n },
            FactorDiagnostics {
                method: FactorMethod::Zero,
                jitter: 0.0,
                distortion: 0.0,
                reconstruction_error: 0.0,
            },
        ));
    }
    if kernel.kind == KernelKind::SeparableCauchy {
        let m = grid.cells_per_axis;
        let g1 = Mat::<f64>::from_fn(m, m, |i, j| {
            kernel.axis_factor(grid.axis_center(i) - grid.axis_center(j))
        });
        let (l1, diag) = factorize(&g1)?;
        return Ok((
            FieldFactor::Kronecker {
                epsilon: kernel.epsilon,
                dim: grid.dim,
                axis_gram: g1,
                axis_factor: l1,
            },
            FactorDiagnostics {
                method: FactorMethod::Kronecker,
                jitter: diag.jitter * kernel.epsilon,
                distortion: diag.distortion,
                reconstruction_error: f64::NAN,
            },
        ));
    }
    let centers = grid.centers();
    let gram = Mat::<f64>::from_fn(n, n, |i, j| kernel.evaluate(&centers[i], &centers[j]));
    let (factor, diag) = factorize(&gram)?;
    Ok((FieldFactor::Dense { gram, factor }, diag))
}

/// Relative Frobenius error of `F Fᵀ` against the kernel Gram matrix.
pub fn reconstruction_error(factor: &FieldFactor, grid: &GridSpec, kernel: &CorrelationKernel) -> f64 {
    let n = grid.n_cells();
    let centers = grid.centers();
    let g = Mat::<f64>::from_fn(n, n, |i, j| kernel.evaluate(&centers[i], &centers[j]));
    let r = factor.reconstruct();
    let gn = g.norm_l2();
    if gn == 0.0 {
        return (&r - &g).norm_l2();
    }
    (&r - &g).norm_l2() / gn
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HistoryPolicy {
    KeepAll,
    KeepLast,
}

/// Increments are generated in fixed-size batches so that the GEMM blocking,
/// and therefore every bit of the output, does not depend on how many steps
/// a caller asks for.
const BATCH: usize = 16;

/// A seeded noise stream on a grid.
#[derive(Clone, Debug)]
pub struct EnvironmentField {
    pub grid: GridSpec,
    pub kernel: CorrelationKernel,
    pub factor: Arc<FieldFactor>,
    pub diagnostics: FactorDiagnostics,
    pub seed: u64,
    pub dt: f64,
    pub history_policy: HistoryPolicy,
    stream: Stream,
    pending: Vec<Vec<f64>>,
    steps: usize,
    history: Vec<Vec<f64>>,
}

impl EnvironmentField {
    /// Factorizes the Gram matrix and seeds the stream.
    pub fn build(grid: GridSpec, kernel: CorrelationKernel, seed: u64, dt: f64, max_cells: usize) -> Result<Self> {
        if kernel.kind != KernelKind::SeparableCauchy && !kernel.is_zero() {
            grid.check_cap(max_cells)?;
        }
        if kernel.dim != grid.dim {
            return Err(Error::param("dim", format!("kernel d = {} but grid d = {}", kernel.dim, grid.dim)));
        }
        let (factor, diagnostics) = build_factor(&grid, &kernel)?;
        Self::with_factor(grid, kernel, Arc::new(factor), diagnostics, seed, dt)
    }

    /// Reuses an existing factor, for replicas that differ only in the seed.
    pub fn with_factor(
        grid: GridSpec,
        kernel: CorrelationKernel,
        factor: Arc<FieldFactor>,
        diagnostics: FactorDiagnostics,
        seed: u64,
        dt: f64,
    ) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::param("sim.dt", format!("must be positive, got {dt}")));
        }
        if factor.n_cells() != grid.n_cells() {
            return Err(Error::MeshMismatch("factor and grid sizes differ".into()));
        }
        Ok(EnvironmentField {
            grid,
            kernel,
            factor,
            diagnostics,
            seed,
            dt,
            history_policy: HistoryPolicy::KeepLast,
            stream: rng::stream(seed, 0),
            pending: Vec::new(),
            steps: 0,
            history: Vec::new(),
        })
    }

    /// Same factor, fresh stream.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut f = self.clone();
        f.seed = seed;
        f.stream = rng::stream(seed, 0);
        f.pending.clear();
        f.steps = 0;
        f.history.clear();
        f
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn history(&self) -> &[Vec<f64>] {
        &self.history
    }

    fn refill(&mut self) {
        let n = self.grid.n_cells();
        if let FieldFactor::Zero { .. } = *self.factor {
            self.pending = vec![vec![0.0; n]; BATCH];
            return;
        }
        let mut z = Mat::<f64>::zeros(n, BATCH);
        for b in 0..BATCH {
            for i in 0..n {
                z[(i, b)] = StandardNormal.sample(&mut self.stream);
            }
        }
        let w = self.factor.apply(&z);
        let sdt = self.dt.sqrt();
        self.pending = (0..BATCH)
            .rev()
            .map(|b| (0..n).map(|i| w[(i, b)] * sdt).collect())
            .collect();
    }

    /// Next increment `ΔW = F z √Δt`.
    pub fn sample_increment(&mut self) -> Vec<f64> {
        if self.pending.is_empty() {
            self.refill();
        }
        let inc = self.pending.pop().expect("refilled batch");
        self.steps += 1;
        match self.history_policy {
            HistoryPolicy::KeepAll => self.history.push(inc.clone()),
            HistoryPolicy::KeepLast => {
                self.history.clear();
                self.history.push(inc.clone());
            }
        }
        inc
    }

    /// Draws `steps` increments into a replayable path.
    pub fn record(&mut self, steps: usize) -> NoisePath {
        let increments = (0..steps).map(|_| self.sample_increment()).collect();
        NoisePath {
            grid: self.grid.clone(),
            dt: self.dt,
            increments,
        }
    }
}

/// A recorded sequence of increments, shared by particles and solvers.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePath {
    pub grid: GridSpec,
    pub dt: f64,
    pub increments: Vec<Vec<f64>>,
}

impl NoisePath {
    /// All-zero path.
    pub fn zero(grid: GridSpec, dt: f64, steps: usize) -> Self {
        let n = grid.n_cells();
        NoisePath {
            grid,
            dt,
            increments: vec![vec![0.0; n]; steps],
        }
    }

    pub fn steps(&self) -> usize {
        self.increments.len()
    }

    /// The same increments in reverse order.
    ///
    /// The particle system reads the noise forward in time while the
    /// log-Laplace equations integrate the dual backward, so a quenched
    /// comparison drives the solver with the reversed path.
    pub fn reversed(&self) -> Self {
        let mut p = self.clone();
        p.increments.reverse();
        p
    }

    pub fn is_zero(&self) -> bool {
        self.increments.iter().all(|v| v.iter().all(|&x| x == 0.0))
    }

    /// Little-endian f64 records, one per step, cells in row-major order.
    pub fn write_records<W: Write>(&self, mut w: W) -> Result<()> {
        for inc in &self.increments {
            let mut buf = Vec::with_capacity(inc.len() * 8);
            for v in inc {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_records<R: Read>(mut r: R, grid: GridSpec, dt: f64) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let rec = grid.n_cells() * 8;
        if rec == 0 || bytes.len() % rec != 0 {
            return Err(Error::MeshMismatch(format!(
                "{} bytes is not a whole number of {}-cell records",
                bytes.len(),
                grid.n_cells()
            )));
        }
        let increments = bytes
            .chunks_exact(rec)
            .map(|c| {
                c.chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect()
            })
            .collect();
        Ok(NoisePath { grid, dt, increments })
    }
}
