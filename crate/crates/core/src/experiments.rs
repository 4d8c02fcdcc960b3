//! Replica studies: law of large numbers, central limit, the martingale
//! normal limit of the environment term, and moment cross-checks.
//!
//! A study runs `n_fields` environment realizations with `n_clouds` particle
//! clouds each. Quenched quantities condition on one field; annealed ones pool
//! across fields. Every field and cloud draws from its own derived seed, so a
//! study reproduces bit for bit from `(config, seed)` whatever the thread
//! count.

use crate::config::{Config, Mode};
use crate::duals::{box_potential_mass, dual_second_moment};
use crate::environment::{EnvironmentField, GridSpec, NoisePath};
use crate::error::{Error, Result};
use crate::kernels::CorrelationKernel;
use crate::particles::{init_cloud, run_occupation, steps_for, BoundaryPolicy, ParticleCloud};
use crate::report::{fmt_f64, CsvTable};
use crate::rng::{derive_seed, label};
use crate::spde::{
    martingale_stat, quenched_v1, sigma_sq, solve_v1, solve_v2_and_moments, xi_estimate, NoiseOrder,
    SolverOptions, StorePolicy,
};
use crate::stats::{ks_test, linear_fit, map_indices, KsResult, MCEstimate, Moments};
use crate::testfn::TestFunction;
use serde::{Deserialize, Serialize};

/// Seed of environment `f`.
pub fn field_seed(master: u64, f: usize) -> u64 {
    derive_seed(derive_seed(master, label::FIELD), f as u64)
}

/// Seed of cloud `c` on environment `f`.
pub fn cloud_seed(master: u64, f: usize, c: usize) -> u64 {
    derive_seed(derive_seed(derive_seed(master, label::CLOUD), f as u64), c as u64)
}

/// One estimated quantity at one horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub quantity: String,
    pub t: f64,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
    /// Reference value, when there is one.
    pub target: Option<f64>,
}

impl EstimateRow {
    fn new(quantity: &str, t: f64, e: &MCEstimate, target: Option<f64>) -> Self {
        EstimateRow {
            quantity: quantity.to_string(),
            t,
            mean: e.mean,
            stderr: e.stderr,
            n: e.n_samples,
            target,
        }
    }

    /// 99% normal-approximation interval.
    pub fn ci99(&self) -> (f64, f64) {
        let h = 2.575_829_303_548_901 * self.stderr;
        (self.mean - h, self.mean + h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsRow {
    pub label: String,
    pub t: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub degenerate: bool,
    /// Bonferroni-adjusted level the p-value is compared with.
    pub level: f64,
}

impl KsRow {
    fn new(label: &str, t: f64, r: &KsResult, level: f64) -> Self {
        KsRow {
            label: label.to_string(),
            t,
            statistic: r.statistic,
            p_value: r.p_value,
            n: r.n,
            degenerate: r.degenerate,
            level,
        }
    }

    pub fn passed(&self) -> bool {
        !self.degenerate && self.p_value > self.level
    }
}

/// A named scalar at one time, e.g. `σ²` of one field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueRow {
    pub quantity: String,
    pub field: usize,
    pub t: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Raw per-replica value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub field: usize,
    pub cloud: usize,
    pub t: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatReport {
    pub mode: Mode,
    pub estimates: Vec<EstimateRow>,
    pub ks: Vec<KsRow>,
    pub values: Vec<ValueRow>,
    /// Named fitted slopes.
    pub trends: Vec<(String, f64)>,
    pub checks: Vec<Check>,
    pub samples: Vec<SampleRow>,
    /// Replicas that failed, with the error.
    pub failures: Vec<String>,
    /// Too few valid samples for the normality tests.
    pub inconclusive: bool,
}

impl StatReport {
    fn new(mode: Mode) -> Self {
        StatReport {
            mode,
            estimates: Vec::new(),
            ks: Vec::new(),
            values: Vec::new(),
            trends: Vec::new(),
            checks: Vec::new(),
            samples: Vec::new(),
            failures: Vec::new(),
            inconclusive: false,
        }
    }

    fn check(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    pub fn estimate(&self, quantity: &str, t: f64) -> Option<&EstimateRow> {
        self.estimates.iter().find(|e| e.quantity == quantity && e.t == t)
    }

    pub fn check_named(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Every check passed.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// CSV tables, keyed by file stem.
    pub fn tables(&self) -> Vec<(String, CsvTable)> {
        let mut est = CsvTable::new(&["quantity", "t", "mean", "stderr", "ci99_lo", "ci99_hi", "n", "target"]);
        for e in &self.estimates {
            let (lo, hi) = e.ci99();
            est.push(vec![
                e.quantity.clone(),
                fmt_f64(e.t),
                fmt_f64(e.mean),
                fmt_f64(e.stderr),
                fmt_f64(lo),
                fmt_f64(hi),
                e.n.to_string(),
                e.target.map(fmt_f64).unwrap_or_default(),
            ]);
        }
        let mut ks = CsvTable::new(&["label", "t", "statistic", "p_value", "n", "degenerate", "level", "passed"]);
        for k in &self.ks {
            ks.push(vec![
                k.label.clone(),
                fmt_f64(k.t),
                fmt_f64(k.statistic),
                fmt_f64(k.p_value),
                k.n.to_string(),
                k.degenerate.to_string(),
                fmt_f64(k.level),
                k.passed().to_string(),
            ]);
        }
        let mut vals = CsvTable::new(&["quantity", "field", "t", "value"]);
        for v in &self.values {
            vals.push(vec![v.quantity.clone(), v.field.to_string(), fmt_f64(v.t), fmt_f64(v.value)]);
        }
        let mut trends = CsvTable::new(&["trend", "slope"]);
        for (n, s) in &self.trends {
            trends.push(vec![n.clone(), fmt_f64(*s)]);
        }
        let mut checks = CsvTable::new(&["check", "passed", "detail"]);
        for c in &self.checks {
            checks.push(vec![c.name.clone(), c.passed.to_string(), c.detail.clone()]);
        }
        let mut samples = CsvTable::new(&["field", "cloud", "t", "value"]);
        for s in &self.samples {
            samples.push(vec![s.field.to_string(), s.cloud.to_string(), fmt_f64(s.t), fmt_f64(s.value)]);
        }
        vec![
            ("estimates".into(), est),
            ("ks".into(), ks),
            ("values".into(), vals),
            ("trends".into(), trends),
            ("checks".into(), checks),
            ("samples".into(), samples),
        ]
    }
}

/// Objects shared by every replica of a study.
pub struct Setup {
    pub cfg: Config,
    pub grid: GridSpec,
    pub kernel: CorrelationKernel,
    pub phi: TestFunction,
    pub field: EnvironmentField,
    pub opts: SolverOptions,
}

impl Setup {
    /// Validates the configuration and factorizes the covariance once.
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let kernel = cfg.kernel()?;
        let phi = cfg.phi()?;
        let field = EnvironmentField::build(grid.clone(), kernel.clone(), field_seed(cfg.seed, 0), cfg.dt(), cfg.caps.max_cells)?;
        Ok(Setup {
            cfg: cfg.clone(),
            grid,
            kernel,
            phi,
            field,
            opts: cfg.solver_options(),
        })
    }

    pub fn dt(&self) -> f64 {
        self.cfg.dt()
    }

    /// Noise path of environment `f`, `steps` steps long.
    pub fn path(&self, f: usize, steps: usize) -> NoisePath {
        self.field.reseeded(field_seed(self.cfg.seed, f)).record(steps)
    }

    /// Poisson cloud with intensity `n λ_box`.
    pub fn poisson_cloud(&self, f: usize, c: usize) -> Result<ParticleCloud> {
        init_cloud(self.cfg.sim.n, &self.grid, cloud_seed(self.cfg.seed, f, c), self.cfg.caps.max_particles)
    }

    /// `n` particles at one point, i.e. the measure `δ_x`.
    pub fn point_cloud(&self, x: &[f64], f: usize, c: usize) -> Result<ParticleCloud> {
        let n = self.cfg.sim.n;
        let pos = x.iter().copied().cycle().take(n * x.len()).collect();
        ParticleCloud::from_positions(self.grid.dim, pos, n, cloud_seed(self.cfg.seed, f, c), self.cfg.caps.max_particles)
    }

    /// `Y_t(φ)` at each time in `times` (sorted), on `path`.
    pub fn occupation(&self, cloud: &mut ParticleCloud, path: &NoisePath, times: &[f64]) -> Result<Vec<f64>> {
        let t_max = *times.last().expect("nonempty");
        let run = run_occupation(cloud, path, t_max, std::slice::from_ref(&self.phi), times, self.cfg.sim.boundary)?;
        Ok(times
            .iter()
            .map(|&t| {
                run.snapshots
                    .iter()
                    .find(|s| (s.t - t).abs() <= 1e-9 * t.max(1.0))
                    .map(|s| s.y_phi)
                    .expect("snapshot at every requested time")
            })
            .collect())
    }

    /// Annealed mean `E[Y_t(φ)]` for a Poisson start on the box.
    pub fn annealed_target(&self, t: f64) -> f64 {
        match self.cfg.sim.boundary {
            // Reflected Brownian motion leaves λ_box invariant.
            BoundaryPolicy::Reflect => t * self.phi.lebesgue_integral(),
            BoundaryPolicy::Free => box_potential_mass(&self.phi, self.grid.half_width, t),
        }
    }

    /// Cell center closest to the test function's center.
    pub fn anchor(&self) -> Vec<f64> {
        let i = self.grid.cell_of(&self.phi.center).unwrap_or(0);
        self.grid.center(i)
    }
}

fn sorted_horizons(cfg: &Config) -> Vec<f64> {
    let mut h = cfg.experiment.horizons.clone();
    h.sort_by(f64::total_cmp);
    h.dedup();
    h
}

/// Per-field occupation values: `out[f][c][k]` is `Y_{T_k}` of cloud `c`.
fn run_fields(s: &Setup, horizons: &[f64]) -> Result<(Vec<Vec<Option<Vec<f64>>>>, Vec<String>)> {
    let dt = s.dt();
    let steps = steps_for(*horizons.last().expect("nonempty"), dt)?;
    for &t in horizons {
        steps_for(t, dt)?;
    }
    let (nf, nc) = (s.cfg.experiment.n_fields, s.cfg.experiment.n_clouds);
    let res: Vec<Vec<Result<Vec<f64>>>> = map_indices(nf, |f| {
        let path = s.path(f, steps);
        (0..nc)
            .map(|c| {
                let mut cloud = s.poisson_cloud(f, c)?;
                s.occupation(&mut cloud, &path, horizons)
            })
            .collect()
    });
    let mut fails = Vec::new();
    let out = res
        .into_iter()
        .enumerate()
        .map(|(f, row)| {
            row.into_iter()
                .enumerate()
                .map(|(c, r)| match r {
                    Ok(v) => Some(v),
                    Err(e) => {
                        fails.push(format!("field {f} cloud {c}: {e}"));
                        None
                    }
                })
                .collect()
        })
        .collect();
    Ok((out, fails))
}

/// Annealed mean with a field-clustered standard error.
fn clustered(groups: &[Vec<f64>], seed: u64) -> MCEstimate {
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    let nonempty: Vec<&Vec<f64>> = groups.iter().filter(|g| !g.is_empty()).collect();
    if nonempty.len() < 2 {
        return MCEstimate::from_samples(&all, seed);
    }
    let means: Vec<f64> = nonempty.iter().map(|g| Moments::from_slice(g).mean()).collect();
    let m = Moments::from_slice(&all);
    MCEstimate {
        mean: m.mean(),
        stderr: Moments::from_slice(&means).stderr(),
        n_samples: all.len(),
        seed,
    }
}

/// Law of large numbers for `T^{-1} Y_T(φ)`.
///
/// Reports, per horizon, the annealed mean against `T^{-1}⟨λ_box, Q_T φ⟩`
/// (which is `⟨λ_box, φ⟩` under reflection), the quenched mean on field 0
/// against its own `T^{-1}⟨λ_grid, V_1^φ(T)⟩`, the replica mean absolute
/// deviation, the literal deviation of the mean, and the variance. The trend
/// checks ask the mean absolute deviation to decrease and the fitted slope of
/// `log Var` against `log T` to be negative.
pub fn run_lln(cfg: &Config) -> Result<StatReport> {
    let s = Setup::new(cfg)?;
    let hs = sorted_horizons(cfg);
    let (vals, fails) = run_fields(&s, &hs)?;
    let mut rep = StatReport::new(Mode::Lln);
    rep.failures = fails;
    let dt = s.dt();
    let path0 = s.path(0, steps_for(*hs.last().unwrap(), dt)?);
    let q0 = quenched_v1(&s.phi, &path0, &hs, &s.opts)?;
    let mut mads = Vec::new();
    let mut vars = Vec::new();
    for (k, &t) in hs.iter().enumerate() {
        let target = s.annealed_target(t) / t;
        let groups: Vec<Vec<f64>> = vals
            .iter()
            .map(|row| row.iter().flatten().map(|v| v[k] / t).collect())
            .collect();
        for (f, row) in vals.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    rep.samples.push(SampleRow { field: f, cloud: c, t, value: v[k] / t });
                }
            }
        }
        let all: Vec<f64> = groups.iter().flatten().copied().collect();
        if all.len() < 2 {
            return Err(Error::Config("fewer than two surviving replicas".into()));
        }
        let ann = clustered(&groups, cfg.seed);
        rep.estimates.push(EstimateRow::new("annealed_mean", t, &ann, Some(target)));
        rep.check(
            &format!("annealed_mean_T{t}"),
            ann.within(target, 3.0, 0.0),
            format!("mean {} target {} stderr {}", ann.mean, target, ann.stderr),
        );
        let qt = q0.masses()[k] / t;
        let quen = MCEstimate::from_samples(&groups[0], cfg.seed);
        rep.estimates.push(EstimateRow::new("quenched_mean_field0", t, &quen, Some(qt)));
        let dev: Vec<f64> = all.iter().map(|v| (v - target).abs()).collect();
        let mad = MCEstimate::from_samples(&dev, cfg.seed);
        rep.estimates.push(EstimateRow::new("mean_abs_dev", t, &mad, None));
        let lit = MCEstimate {
            mean: (ann.mean - target).abs(),
            ..ann
        };
        rep.estimates.push(EstimateRow::new("abs_dev_of_mean", t, &lit, None));
        let var = Moments::from_slice(&all).variance();
        rep.values.push(ValueRow {
            quantity: "variance".into(),
            field: 0,
            t,
            value: var,
        });
        mads.push(mad.mean);
        vars.push(var);
    }
    if hs.len() >= 2 {
        let lt: Vec<f64> = hs.iter().map(|t| t.ln()).collect();
        let lv: Vec<f64> = vars.iter().map(|v| v.ln()).collect();
        let fit = linear_fit(&lt, &lv);
        rep.trends.push(("log_variance_vs_log_T".into(), fit.slope));
        rep.check(
            "variance_slope_negative",
            fit.slope < 0.0,
            format!("slope {} ± {}", fit.slope, fit.slope_stderr),
        );
        rep.check(
            "mean_abs_dev_decreasing",
            mads.windows(2).all(|w| w[1] < w[0]),
            format!("{mads:?}"),
        );
    }
    Ok(rep)
}

/// Quenched centering, limit variance and exact finite-horizon variance of
/// one field at one horizon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuenchedMoments {
    /// `⟨λ_grid, V_1^φ(T)⟩`, the quenched mean of `Y_T(φ)`.
    pub center: f64,
    /// `h^d Σ V_1^φ(T)²`.
    pub sigma_sq: f64,
    /// `Var^W(Y_T) / T` for a Poisson start: `(⟨λ, V_2⟩ + n^{-1}⟨λ, V_1²⟩) / T`.
    pub var_exact: f64,
}

/// Conditional moments of `Y_T(φ)` given the path, for a particle system
/// reading `path` forward.
pub fn quenched_moments(phi: &TestFunction, path: &NoisePath, t: f64, n: usize, opts: &SolverOptions) -> Result<QuenchedMoments> {
    let every = SolverOptions {
        store: StorePolicy::EveryStep,
        ..*opts
    };
    let v1 = solve_v1(phi, path, t, NoiseOrder::Reversed, &every)?;
    let w = path.grid.cell_volume();
    let lam = vec![w; path.grid.n_cells()];
    let rec = solve_v2_and_moments(&v1, path, NoiseOrder::Reversed, &lam, 2, &every)?;
    let last = v1.values.len() - 1;
    let center = rec.l[1][last];
    let s2 = sigma_sq(&v1).last();
    let v2 = rec.l[2][last] - center * center;
    Ok(QuenchedMoments {
        center,
        sigma_sq: s2,
        var_exact: (v2 + s2 / n as f64) / t,
    })
}

fn normal_cdf_scaled(sd: f64) -> impl Fn(f64) -> f64 {
    move |x| crate::special::normal_cdf(x / sd)
}

/// Central limit study of `T^{-1/2}(Y_T(φ) - ⟨λ_grid, V_1^φ(T)⟩)`.
///
/// Quenched: per field, KS against `Normal(0, σ²)` with `σ² = h^d Σ V_1(T)²`
/// from the same field. Annealed: all fields pooled against the equal-weight
/// mixture of the per-field normals.
pub fn run_clt(cfg: &Config) -> Result<StatReport> {
    let s = Setup::new(cfg)?;
    let hs = sorted_horizons(cfg);
    let (vals, fails) = run_fields(&s, &hs)?;
    let mut rep = StatReport::new(Mode::Clt);
    rep.failures = fails;
    let dt = s.dt();
    let steps = steps_for(*hs.last().unwrap(), dt)?;
    let nf = cfg.experiment.n_fields;
    let moments: Vec<Vec<QuenchedMoments>> = map_indices(nf, |f| {
        let path = s.path(f, steps);
        hs.iter()
            .map(|&t| quenched_moments(&s.phi, &path, t, cfg.sim.n, &s.opts))
            .collect::<Result<Vec<_>>>()
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let level = cfg.experiment.ks_level / (hs.len() * nf) as f64;
    let t_last = *hs.last().unwrap();
    for (k, &t) in hs.iter().enumerate() {
        let rt = t.sqrt();
        let mut pooled = Vec::new();
        let mut sds = Vec::new();
        let mut within = 0.0;
        let mut ratio_sum = 0.0;
        for f in 0..nf {
            let m = moments[f][k];
            let stat: Vec<f64> = vals[f].iter().flatten().map(|v| (v[k] - m.center) / rt).collect();
            for (c, v) in vals[f].iter().enumerate() {
                if let Some(v) = v {
                    rep.samples.push(SampleRow { field: f, cloud: c, t, value: (v[k] - m.center) / rt });
                }
            }
            for (q, v) in [("sigma_sq", m.sigma_sq), ("var_exact", m.var_exact), ("center", m.center)] {
                rep.values.push(ValueRow {
                    quantity: q.into(),
                    field: f,
                    t,
                    value: v,
                });
            }
            let mo = Moments::from_slice(&stat);
            within += mo.variance() * (mo.n as f64 - 1.0) / mo.n.max(1) as f64;
            ratio_sum += mo.variance() / m.sigma_sq;
            if stat.len() >= 8 {
                let r = ks_test(&stat, normal_cdf_scaled(m.sigma_sq.sqrt()));
                rep.ks.push(KsRow::new(&format!("quenched_field{f}"), t, &r, level));
            }
            pooled.extend(stat);
            sds.push(m.sigma_sq.sqrt());
        }
        let est = MCEstimate::from_samples(&pooled, cfg.seed);
        rep.estimates.push(EstimateRow::new("statistic_mean", t, &est, Some(0.0)));
        rep.check(
            &format!("centering_T{t}"),
            est.within(0.0, 3.0, 0.0),
            format!("mean {} stderr {}", est.mean, est.stderr),
        );
        let mo = Moments::from_slice(&pooled);
        let total = mo.variance() * (mo.n as f64 - 1.0) / mo.n as f64;
        let within = within / nf as f64;
        rep.values.push(ValueRow {
            quantity: "annealed_variance".into(),
            field: 0,
            t,
            value: total,
        });
        if pooled.len() < 50 {
            rep.inconclusive = true;
            continue;
        }
        let mix = |x: f64| sds.iter().map(|&sd| crate::special::normal_cdf(x / sd)).sum::<f64>() / sds.len() as f64;
        let r = ks_test(&pooled, mix);
        rep.ks.push(KsRow::new("annealed", t, &r, cfg.experiment.ks_level / hs.len() as f64));
        if t == t_last {
            // Equal cloud counts make the decomposition exact for the
            // population variances.
            let equal = vals.iter().all(|r| r.iter().flatten().count() == cfg.experiment.n_clouds);
            rep.check(
                "total_variance_dominates_quenched",
                !equal || total >= within * (1.0 - 1e-12),
                format!("annealed {total} mean quenched {within}"),
            );
            let ratio = ratio_sum / nf as f64;
            rep.check(
                "variance_match",
                (ratio - 1.0).abs() < 0.3,
                format!("mean empirical variance / sigma_sq = {ratio}"),
            );
        }
    }
    if !rep.inconclusive {
        for row in rep.ks.iter().filter(|r| r.t == t_last) {
            let p = row.passed();
            let detail = format!("D {} p {} level {}", row.statistic, row.p_value, row.level);
            rep.checks.push(Check {
                name: format!("ks_{}", row.label),
                passed: p,
                detail,
            });
        }
    }
    Ok(rep)
}

/// Normal limit of the environment term
/// `S_T = T^{-1/2}(⟨λ_grid, V_1^φ(T)⟩ - T⟨λ_grid, φ⟩)` across fields,
/// self-normalized by the realized quadratic variation `ξ̂ = ⟨N⟩_T / T`.
pub fn run_prop(cfg: &Config) -> Result<StatReport> {
    let s = Setup::new(cfg)?;
    let hs = sorted_horizons(cfg);
    let steps = steps_for(*hs.last().unwrap(), s.dt())?;
    let every = SolverOptions {
        store: StorePolicy::EveryStep,
        ..s.opts
    };
    let nf = cfg.experiment.n_fields;
    let factor = s.field.factor.clone();
    let per_field: Vec<Result<(Vec<f64>, Vec<f64>, f64, Vec<f64>, Vec<f64>)>> = map_indices(nf, |f| {
        let path = s.path(f, steps);
        let v1 = solve_v1(&s.phi, &path, *hs.last().unwrap(), NoiseOrder::Forward, &every)?;
        let ms = martingale_stat(&v1, &s.phi, &path, &factor, NoiseOrder::Forward)?;
        let sig = sigma_sq(&v1);
        let xi = xi_estimate(&v1, &factor);
        let mut st = Vec::new();
        let mut qv = Vec::new();
        let mut s2 = Vec::new();
        let mut xs = Vec::new();
        for &t in &hs {
            let k = steps_for(t, s.dt())?;
            st.push(ms.n_path[k] / t.sqrt());
            qv.push(ms.qv_path[k] / t);
            s2.push(sig.values[k]);
            xs.push(xi.values[k]);
        }
        Ok((st, qv, ms.identity_residual(), s2, xs))
    });
    let mut rep = StatReport::new(Mode::Prop);
    let mut ok = Vec::new();
    for (f, r) in per_field.into_iter().enumerate() {
        match r {
            Ok(v) => ok.push((f, v)),
            Err(e) => rep.failures.push(format!("field {f}: {e}")),
        }
    }
    let worst = ok.iter().map(|(_, v)| v.2).fold(0.0, f64::max);
    rep.check("martingale_identity", worst < 1e-8, format!("max relative residual {worst:e}"));
    let level = cfg.experiment.ks_level / hs.len() as f64;
    for (k, &t) in hs.iter().enumerate() {
        let st: Vec<f64> = ok.iter().map(|(_, v)| v.0[k]).collect();
        for (f, v) in &ok {
            rep.samples.push(SampleRow { field: *f, cloud: 0, t, value: v.0[k] });
            for (q, x) in [("xi_hat", v.1[k]), ("sigma_sq", v.3[k]), ("xi_rate", v.4[k])] {
                rep.values.push(ValueRow {
                    quantity: q.into(),
                    field: *f,
                    t,
                    value: x,
                });
            }
        }
        rep.estimates.push(EstimateRow::new("S_T", t, &MCEstimate::from_samples(&st, cfg.seed), Some(0.0)));
        if s.kernel.is_zero() {
            rep.check(&format!("S_T_zero_T{t}"), st.iter().all(|&v| v == 0.0), format!("{st:?}"));
            continue;
        }
        let z: Vec<f64> = ok.iter().map(|(_, v)| v.0[k] / v.1[k].sqrt()).collect();
        if z.len() < 50 {
            rep.inconclusive = true;
            continue;
        }
        let r = ks_test(&z, crate::special::normal_cdf);
        let row = KsRow::new("normalized_S_T", t, &r, level);
        if k + 1 == hs.len() {
            rep.check("ks_normalized_S_T", row.passed(), format!("D {} p {}", r.statistic, r.p_value));
        }
        rep.ks.push(row);
    }
    Ok(rep)
}

/// Particle moments against the moment formulas.
///
/// * first moment: Poisson start on the box, annealed `E[Y_t(φ)]` against
///   `⟨λ_box, Q_t φ⟩` (or `t⟨λ_box, φ⟩` under reflection);
/// * second moment: `n` particles at the cell center `x_0` nearest the
///   center of `φ`, annealed `E[Y_t(φ)²]` against the Feynman-Kac estimate
///   of `V^{φφ}_t(x_0,x_0) + ∫_0^t ∫ p_{t-s}(x_0,y) V^{φφ}_s(y,y) dy ds`;
/// * conditional second moment: the same start on field 0, cloud average of
///   `Y_t(φ)²` against `L^{(2)}_t` from the grid recursion.
///
/// Uses `n_fields` annealed replicas, `n_clouds` clouds for the conditional
/// check and `t = sim.T`, which must be at most 1.
pub fn moment_crosscheck(cfg: &Config) -> Result<StatReport> {
    let s = Setup::new(cfg)?;
    let t = cfg.sim.horizon;
    if t > 1.0 {
        return Err(Error::Config("`sim.T` must be <= 1 for the moment cross-check".into()));
    }
    let steps = steps_for(t, s.dt())?;
    let nf = cfg.experiment.n_fields;
    let x0 = s.anchor();
    let runs: Vec<(Result<Vec<f64>>, Result<Vec<f64>>)> = map_indices(nf, |f| {
        let path = s.path(f, steps);
        let first = s.poisson_cloud(f, 0).and_then(|mut c| s.occupation(&mut c, &path, &[t]));
        let second = s.point_cloud(&x0, f, 1).and_then(|mut c| s.occupation(&mut c, &path, &[t]));
        (first, second)
    });
    let mut rep = StatReport::new(Mode::Moments);
    let mut y1 = Vec::new();
    let mut y2 = Vec::new();
    for (f, (a, b)) in runs.into_iter().enumerate() {
        match a {
            Ok(v) => y1.push(v[0]),
            Err(e) => rep.failures.push(format!("field {f} first moment: {e}")),
        }
        match b {
            Ok(v) => y2.push(v[0] * v[0]),
            Err(e) => rep.failures.push(format!("field {f} second moment: {e}")),
        }
    }
    let target1 = s.annealed_target(t);
    let e1 = MCEstimate::from_samples(&y1, cfg.seed);
    rep.estimates.push(EstimateRow::new("first_moment", t, &e1, Some(target1)));
    rep.check(
        "first_moment",
        e1.within(target1, 3.0, 0.0),
        format!("particles {} ± {} oracle {}", e1.mean, e1.stderr, target1),
    );
    let oracle_cfg = crate::duals::PathConfig {
        seed: derive_seed(cfg.seed, label::ORACLE),
        ..cfg.path_config()
    };
    let o2 = dual_second_moment(&s.phi, t, &x0, &s.kernel, &oracle_cfg)?;
    let e2 = MCEstimate::from_samples(&y2, cfg.seed);
    rep.estimates.push(EstimateRow::new("second_moment", t, &e2, Some(o2.mean)));
    rep.estimates.push(EstimateRow::new("second_moment_oracle", t, &o2, None));
    rep.check(
        "second_moment",
        e2.within(o2.mean, 3.0, o2.stderr),
        format!("particles {} ± {} oracle {} ± {}", e2.mean, e2.stderr, o2.mean, o2.stderr),
    );
    // Conditional moments on field 0.
    let path = s.path(0, steps);
    let every = SolverOptions {
        store: StorePolicy::EveryStep,
        ..s.opts
    };
    let v1 = solve_v1(&s.phi, &path, t, NoiseOrder::Reversed, &every)?;
    let mut mu = vec![0.0; s.grid.n_cells()];
    mu[s.grid.cell_of(&x0).expect("anchor inside the box")] = 1.0;
    let rec = solve_v2_and_moments(&v1, &path, NoiseOrder::Reversed, &mu, 2, &every)?;
    let l2 = *rec.l[2].last().unwrap();
    let nc = cfg.experiment.n_clouds;
    let cond: Vec<Result<f64>> = map_indices(nc, |c| {
        let mut cloud = s.point_cloud(&x0, 0, 2 + c)?;
        Ok(s.occupation(&mut cloud, &path, &[t])?[0].powi(2))
    });
    let mut yc = Vec::new();
    for (c, r) in cond.into_iter().enumerate() {
        match r {
            Ok(v) => yc.push(v),
            Err(e) => rep.failures.push(format!("conditional cloud {c}: {e}")),
        }
    }
    let ec = MCEstimate::from_samples(&yc, cfg.seed);
    rep.estimates.push(EstimateRow::new("conditional_second_moment", t, &ec, Some(l2)));
    rep.check(
        "conditional_second_moment",
        ec.within(l2, 3.0, 0.0),
        format!("clouds {} ± {} recursion {}", ec.mean, ec.stderr, l2),
    );
    Ok(rep)
}

/// Snapshot table `(replica, t, phi_id, X_t_phi, Y_t_phi)` over
/// `n_fields × n_clouds` annealed replicas, plus the noise path of field 0.
pub fn simulate(cfg: &Config) -> Result<(CsvTable, NoisePath)> {
    let s = Setup::new(cfg)?;
    let t = cfg.sim.horizon;
    let steps = steps_for(t, s.dt())?;
    let mut times = cfg.sim.snapshot_times.clone();
    if times.is_empty() {
        times.push(t);
    }
    times.sort_by(f64::total_cmp);
    times.dedup();
    let (nf, nc) = (cfg.experiment.n_fields, cfg.experiment.n_clouds);
    let runs: Vec<Vec<Result<Vec<crate::particles::Snapshot>>>> = map_indices(nf, |f| {
        let path = s.path(f, steps);
        (0..nc)
            .map(|c| {
                let mut cloud = s.poisson_cloud(f, c)?;
                let r = run_occupation(&mut cloud, &path, t, std::slice::from_ref(&s.phi), &times, cfg.sim.boundary)?;
                Ok(r.snapshots)
            })
            .collect()
    });
    let mut table = CsvTable::new(&["replica", "t", "phi_id", "X_t_phi", "Y_t_phi"]);
    for (f, row) in runs.into_iter().enumerate() {
        for (c, r) in row.into_iter().enumerate() {
            for sn in r? {
                table.push(vec![
                    (f * nc + c).to_string(),
                    fmt_f64(sn.t),
                    sn.phi_id.to_string(),
                    fmt_f64(sn.x_phi),
                    fmt_f64(sn.y_phi),
                ]);
            }
        }
    }
    Ok((table, s.path(0, steps)))
}

/// Dispatches on `experiment.mode`.
pub fn run(cfg: &Config) -> Result<StatReport> {
    match cfg.experiment.mode {
        Mode::Lln => run_lln(cfg),
        Mode::Clt => run_clt(cfg),
        Mode::Prop => run_prop(cfg),
        Mode::Moments => moment_crosscheck(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelKind;
    use crate::testfn::TestFnKind;

    fn small(mode: Mode, kind: KernelKind) -> Config {
        let mut c = Config::default();
        c.kernel.kind = kind;
        c.grid.half_width = 2.0;
        c.grid.m = 4;
        c.sim.n = 4;
        c.sim.horizon = 1.0;
        c.sim.boundary = BoundaryPolicy::Reflect;
        c.phi.kind = TestFnKind::Bump;
        c.phi.radius = 1.5;
        c.experiment.mode = mode;
        c.experiment.horizons = vec![1.0, 2.0];
        c.experiment.n_fields = 3;
        c.experiment.n_clouds = 2;
        c.duals.n_paths = 200;
        c
    }

    #[test]
    fn seeds_are_distinct_across_replicas() {
        let a = field_seed(1, 0);
        assert_ne!(a, field_seed(1, 1));
        assert_ne!(cloud_seed(1, 0, 1), cloud_seed(1, 1, 0));
    }

    #[test]
    fn lln_report_is_deterministic() {
        let c = small(Mode::Lln, KernelKind::CauchyPD);
        let a = run_lln(&c).unwrap();
        let b = run_lln(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.len(), 2 * 6);
        assert!(a.estimate("annealed_mean", 2.0).is_some());
    }

    #[test]
    fn prop_statistic_vanishes_without_noise() {
        let r = run_prop(&small(Mode::Prop, KernelKind::Zero)).unwrap();
        assert!(r.check_named("S_T_zero_T2").unwrap().passed);
        assert!(r.check_named("martingale_identity").unwrap().passed);
    }

    #[test]
    fn clt_total_variance_identity_holds() {
        let mut c = small(Mode::Clt, KernelKind::CauchyPD);
        c.experiment.n_clouds = 20;
        let r = run_clt(&c).unwrap();
        assert!(r.check_named("total_variance_dominates_quenched").unwrap().passed);
        assert!(r.failures.is_empty());
    }

    #[test]
    fn moment_crosscheck_rejects_long_horizons() {
        let mut c = small(Mode::Moments, KernelKind::Zero);
        c.sim.horizon = 2.0;
        assert!(moment_crosscheck(&c).is_err());
    }
}
