//! One function per subcommand. Each returns an [`Outcome`] that `main`
//! writes into the run directory.

use std::path::{Path, PathBuf};

use rand::Rng;
use supenv::config::{Config, Mode};
use supenv::duals::{
    apply_q, bound_checks, dual_expmoment, dual_v_potentials, tail_integral, CheckOptions, PathConfig, Potential, RatioReport,
};
use supenv::environment::{build_factor, reconstruction_error, EnvironmentField, FactorMethod, GridSpec};
use supenv::experiments::{self, field_seed, Check, StatReport};
use supenv::kernels::{epsilon_threshold, green_constant, green_integral};
use supenv::particles::steps_for;
use supenv::quadrature::QuadConfig;
use supenv::report::{fmt_f64, svg_histogram, svg_lines, CsvTable, RunManifest, Series};
use supenv::rng::{derive_seed, label, stream};
use supenv::special::sphere_area;
use supenv::spde::{
    clt_decomposition, martingale_stat, sigma_sq, solve_ut_vt, solve_v1, xi_estimate, NoiseOrder, SolverOptions,
    StorePolicy,
};
use supenv::stats::{loglog_slope, Moments};
use supenv::Result;

/// Artifacts and verdicts of one subcommand.
#[derive(Default)]
pub struct Outcome {
    pub tables: Vec<(String, CsvTable)>,
    pub svgs: Vec<(String, String)>,
    pub records: Vec<(String, Vec<u8>)>,
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
}

impl Outcome {
    fn check(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail,
        });
    }

    fn table(&mut self, stem: &str, t: CsvTable) {
        self.tables.push((stem.into(), t));
    }

    pub fn write(&self, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
        let mut checks = CsvTable::new(&["check", "passed", "detail"]);
        for c in &self.checks {
            checks.push(vec![c.name.clone(), c.passed.to_string(), c.detail.clone()]);
        }
        let has_checks = self.tables.iter().any(|(n, _)| n == "checks");
        let extra = (!has_checks).then(|| ("checks".to_string(), checks));
        for (stem, t) in self.tables.iter().chain(extra.iter()) {
            let file = format!("{stem}.csv");
            t.write(dir.join(&file))?;
            manifest.register(&file, t);
        }
        for (name, svg) in &self.svgs {
            std::fs::write(dir.join(name), svg)?;
        }
        for (name, bytes) in &self.records {
            std::fs::write(dir.join(name), bytes)?;
        }
        Ok(())
    }
}

fn summary_table(rows: &[(&str, f64)]) -> CsvTable {
    let mut t = CsvTable::new(&["quantity", "value"]);
    for (k, v) in rows {
        t.push(vec![k.to_string(), fmt_f64(*v)]);
    }
    t
}

/// Envelope, positive definiteness on a small lattice, Green integral and
/// tail-integral slope.
pub fn kernel_check(cfg: &Config) -> Result<Outcome> {
    cfg.validate()?;
    let mut out = Outcome::default();
    let k = cfg.kernel()?;
    let (d, alpha) = (cfg.dim, cfg.kernel.alpha);
    let rs: Vec<f64> = (0..=100).map(|i| i as f64 * 0.1).collect();
    let mut prof = CsvTable::new(&["r", "g", "envelope"]);
    let mut below = true;
    let (mut g, mut env) = (Vec::new(), Vec::new());
    for &r in &rs {
        let (a, b) = (k.radial(r), k.bound(r));
        below &= a <= b * (1.0 + 1e-12);
        prof.push_f64(&[r, a, b]);
        g.push(a);
        env.push(b);
    }
    out.check("below_envelope", below, format!("{} radii in [0, 10]", rs.len()));
    out.svgs.push((
        "kernel.svg".into(),
        svg_lines(
            "kernel profile",
            &[
                Series { label: "g", x: &rs, y: &g },
                Series { label: "envelope", x: &rs, y: &env },
            ],
        ),
    ));
    out.table("kernel_profile", prof);

    let lattice = GridSpec::new(d, cfg.grid.half_width, 3)?;
    let (factor, diag) = build_factor(&lattice, &k)?;
    let recon = reconstruction_error(&factor, &lattice, &k);
    if k.is_positive_definite() {
        out.check(
            "positive_definite_on_lattice",
            diag.distortion == 0.0 && recon < 1e-8,
            format!("method {:?}, distortion {:e}, reconstruction {recon:e}", diag.method, diag.distortion),
        );
    } else if diag.method == FactorMethod::EigenClipped {
        out.warnings.push(format!(
            "kernel is not positive definite on a 3^{d} lattice; clipping removed {:.3e} of the trace",
            diag.distortion
        ));
    }

    let gi = green_integral(alpha, d, &QuadConfig::with_rel_tol(1e-10))?;
    let closed = sphere_area(d) * (0.5 + 1.0 / (alpha - 2.0));
    out.check(
        "green_integral",
        (gi / closed - 1.0).abs() < 1e-3,
        format!("quadrature {gi}, closed form {closed}"),
    );
    let q = cfg.bound_fns()?.q();
    let eps_star = epsilon_threshold(q, alpha, d)?;
    let ts: Vec<f64> = (0..13).map(|i| 10f64.powf(1.0 + 3.0 * i as f64 / 12.0)).collect();
    let tail: Vec<f64> = ts.iter().map(|&t| tail_integral(alpha, d, t)).collect::<Result<_>>()?;
    let slope = loglog_slope(&ts, &tail);
    let want = -alpha.min(d as f64) / 2.0;
    if (alpha - d as f64).abs() >= 0.5 {
        out.check(
            "tail_slope",
            (slope - want).abs() <= 0.05,
            format!("slope {slope} over t in [10, 1e4], expected {want}"),
        );
    } else {
        out.warnings.push(format!(
            "alpha = {alpha} is close to d = {d}; the tail slope {slope} is reported without a check"
        ));
    }
    out.table(
        "kernel_summary",
        summary_table(&[
            ("green_integral", gi),
            ("green_constant", green_constant(d)),
            ("q", q),
            ("epsilon_threshold", eps_star),
            ("tail_slope", slope),
            ("lattice_distortion", diag.distortion),
            ("lattice_reconstruction_error", recon),
        ]),
    );
    Ok(out)
}

/// Factorizes the field covariance and samples `sim.T / dt` increments.
pub fn field_check(cfg: &Config) -> Result<Outcome> {
    cfg.validate()?;
    let mut out = Outcome::default();
    let grid = cfg.grid()?;
    let kernel = cfg.kernel()?;
    let dt = cfg.dt();
    let mut field = EnvironmentField::build(grid.clone(), kernel.clone(), field_seed(cfg.seed, 0), dt, cfg.caps.max_cells)?;
    let diag = field.diagnostics;
    let recon = if grid.n_cells() <= 2048 {
        reconstruction_error(&field.factor, &grid, &kernel)
    } else {
        out.warnings
            .push(format!("{} cells: dense reconstruction check skipped", grid.n_cells()));
        f64::NAN
    };
    if recon.is_finite() && diag.method != FactorMethod::EigenClipped {
        out.check("reconstruction", recon <= 1e-8, format!("relative Frobenius error {recon:e}"));
    }
    if diag.method == FactorMethod::EigenClipped {
        out.warnings
            .push(format!("eigenvalue clipping engaged: {:.3e} of the trace removed", diag.distortion));
    }
    let steps = steps_for(cfg.sim.horizon, dt)?;
    let path = field.record(steps);
    let mut per_step = CsvTable::new(&["step", "mean", "mean_square", "max_abs"]);
    let mut ratios = Vec::new();
    let mut clipped = 0usize;
    let var = kernel.evaluate(&grid.center(0), &grid.center(0)) * dt;
    for (j, inc) in path.increments.iter().enumerate() {
        let n = inc.len() as f64;
        let mean = inc.iter().sum::<f64>() / n;
        let ms = inc.iter().map(|v| v * v).sum::<f64>() / n;
        let mx = inc.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        clipped += inc.iter().filter(|v| v.abs() > 1.0).count();
        per_step.push(vec![j.to_string(), fmt_f64(mean), fmt_f64(ms), fmt_f64(mx)]);
        if var > 0.0 {
            ratios.push(ms / var);
        }
    }
    let frac = clipped as f64 / (steps * grid.n_cells()).max(1) as f64;
    if cfg.kernel.epsilon * dt <= 1e-3 {
        out.check("clipping_rare", frac < 1e-6, format!("fraction of |dW| > 1: {frac:e}"));
    }
    let m = Moments::from_slice(&ratios);
    if ratios.len() >= 10 {
        out.check(
            "increment_variance",
            (m.mean() - 1.0).abs() <= 4.0 * m.stderr(),
            format!("mean square / (g(x,x) dt) = {} ± {}", m.mean(), m.stderr()),
        );
    }
    out.table(
        "field_summary",
        summary_table(&[
            ("cells", grid.n_cells() as f64),
            ("jitter", diag.jitter),
            ("distortion", diag.distortion),
            ("reconstruction_error", recon),
            ("clip_fraction", frac),
            ("variance_ratio", m.mean()),
        ]),
    );
    out.table("field_steps", per_step);
    if cfg.sim.record_noise {
        let mut bytes = Vec::new();
        path.write_records(&mut bytes)?;
        out.records.push(("noise.bin".into(), bytes));
    }
    Ok(out)
}

/// Particle snapshots, and the linear SPDE driven by field 0 with its
/// discrete identities.
pub fn simulate(cfg: &Config) -> Result<Outcome> {
    let mut out = Outcome::default();
    out.warnings = cfg.validate()?;
    let (snaps, path) = experiments::simulate(cfg)?;
    let ys: Vec<f64> = snaps
        .rows
        .iter()
        .filter(|r| r[1].parse::<f64>().ok() == Some(cfg.sim.horizon))
        .filter_map(|r| r[4].parse().ok())
        .collect();
    out.svgs.push(("y_hist.svg".into(), svg_histogram("Y_T(phi) across replicas", &ys, 20)));
    out.table("snapshots", snaps);

    let phi = cfg.phi()?;
    let factor = EnvironmentField::build(cfg.grid()?, cfg.kernel()?, 0, cfg.dt(), cfg.caps.max_cells)?.factor;
    let opts = SolverOptions {
        store: StorePolicy::EveryStep,
        ..cfg.solver_options()
    };
    let t = cfg.sim.horizon;
    let v1 = solve_v1(&phi, &path, t, NoiseOrder::Forward, &opts)?;
    let (ut, vt) = solve_ut_vt(&phi, &v1, &path, t, NoiseOrder::Forward, &opts)?;
    let dec = clt_decomposition(&v1, &ut, &vt, &path, t, NoiseOrder::Forward)?;
    let ms = martingale_stat(&v1, &phi, &path, &factor, NoiseOrder::Forward)?;
    let s2 = sigma_sq(&v1);
    let xi = xi_estimate(&v1, &factor);
    let masses = v1.masses();
    let mut trace = CsvTable::new(&["t", "mass_V1", "sigma_sq", "xi", "N", "quadratic_variation"]);
    for k in 0..v1.times.len() {
        trace.push_f64(&[v1.times[k], masses[k], s2.values[k], xi.values[k], ms.n_path[k], ms.qv_path[k]]);
    }
    out.svgs.push((
        "spde.svg".into(),
        svg_lines(
            "sigma_sq(t)",
            &[Series {
                label: "sigma_sq",
                x: &s2.times,
                y: &s2.values,
            }],
        ),
    ));
    out.table("spde_trace", trace);
    let mut dtab = CsvTable::new(&["I1", "I2", "I3", "lhs", "relative_residual"]);
    dtab.push_f64(&[dec.i1, dec.i2, dec.i3, dec.lhs, dec.relative_residual()]);
    out.table("decomposition", dtab);
    out.check(
        "clt_identity",
        dec.relative_residual() < 1e-8,
        format!("relative residual {:e}", dec.relative_residual()),
    );
    out.check(
        "martingale_identity",
        ms.identity_residual() < 1e-8,
        format!("relative residual {:e}", ms.identity_residual()),
    );
    let mut violations = 0usize;
    for (a, b) in v1.values.iter().zip(&vt.values) {
        let tol = 1e-12 * a.iter().map(|x| x * x).sum::<f64>().sqrt();
        violations += a.iter().zip(b).filter(|(v, w)| **w < -tol || **w > **v + tol).count();
    }
    out.check("comparison", violations == 0, format!("{violations} cells outside 0 <= v_T <= V_1"));
    if cfg.sim.record_noise {
        let mut noise = Vec::new();
        path.write_records(&mut noise)?;
        out.records.push(("noise.bin".into(), noise));
        let mut v = Vec::new();
        v1.write_records(&mut v)?;
        out.records.push(("v1.bin".into(), v));
    }
    Ok(out)
}

fn ratio_rows(t: &mut CsvTable, r: &RatioReport) {
    for e in &r.entries {
        t.push(vec![
            r.name.clone(),
            fmt_f64(e.t),
            fmt_f64(e.x_norm),
            fmt_f64(e.y_norm),
            fmt_f64(e.numerator),
            fmt_f64(e.denominator),
            fmt_f64(e.ratio),
        ]);
    }
}

/// Feynman-Kac oracles.
pub fn duals(cfg: &Config) -> Result<Outcome> {
    let mut out = Outcome::default();
    out.warnings = cfg.validate()?;
    let d = cfg.dim;
    let phi = cfg.phi()?;
    let kernel = cfg.kernel()?;
    let pc = cfg.path_config();
    let mut rng = stream(derive_seed(cfg.seed, label::POINTS), 0);
    let mut tab = CsvTable::new(&[
        "quantity", "t", "x_norm", "y_norm", "estimate", "stderr", "n", "seed", "reference", "epsilon", "alpha",
    ]);
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut worst: f64 = 0.0;
    let mut below = 0usize;
    // Tuple times lie in (0.2, 2], so one table serves all of them.
    let pot = Potential::new(&phi, 2.0);
    for k in 0..cfg.duals.tuples {
        let t = rng.random_range(0.2..=2.0);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..=1.5)).collect();
        let y: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..=1.5)).collect();
        let c = PathConfig {
            seed: derive_seed(pc.seed, k as u64),
            ..pc
        };
        let e = dual_v_potentials(&pot, &pot, t, &x, &y, &kernel, &c)?;
        let reference = apply_q(&phi, t, &x) * apply_q(&phi, t, &y);
        let z = (e.mean - reference) / e.stderr;
        worst = worst.max(z.abs());
        if z < -3.0 {
            below += 1;
        }
        tab.push(vec![
            "dual_v".into(),
            fmt_f64(t),
            fmt_f64(norm(&x)),
            fmt_f64(norm(&y)),
            fmt_f64(e.mean),
            fmt_f64(e.stderr),
            e.n_samples.to_string(),
            e.seed.to_string(),
            fmt_f64(reference),
            fmt_f64(kernel.epsilon),
            fmt_f64(cfg.kernel.alpha),
        ]);
    }
    if cfg.duals.tuples > 0 {
        if kernel.is_zero() {
            out.check("factorization", worst <= 3.0, format!("max |z| = {worst:.3} over {} tuples", cfg.duals.tuples));
        } else {
            out.check(
                "noise_raises_second_moment",
                below == 0,
                format!("{below} tuples more than 3 stderr below Q phi(x) Q phi(y)"),
            );
        }
    }

    let bf = cfg.bound_fns()?;
    let q = bf.q();
    let eps = if kernel.is_zero() { 0.0 } else { epsilon_threshold(q, cfg.kernel.alpha, d)? };
    let k_star = kernel.with_epsilon(eps);
    let o = vec![0.0; d];
    let em = dual_expmoment(q, &k_star, &o, &o, cfg.duals.horizon, &pc)?;
    tab.push(vec![
        "exp_moment".into(),
        fmt_f64(cfg.duals.horizon),
        "0".into(),
        "0".into(),
        fmt_f64(em.estimate.mean),
        fmt_f64(em.estimate.stderr),
        em.estimate.n_samples.to_string(),
        em.estimate.seed.to_string(),
        fmt_f64(em.tail_diagnostic),
        fmt_f64(eps),
        fmt_f64(cfg.kernel.alpha),
    ]);
    out.check(
        "exp_moment_tail",
        em.tail_diagnostic < 0.01 * em.estimate.mean,
        format!("tail {} at horizon {}", em.tail_diagnostic, cfg.duals.horizon),
    );
    out.check(
        "exp_moment_below_two",
        em.estimate.mean <= 2.0 + 3.0 * em.estimate.stderr,
        format!("q = {q}, epsilon = {eps}: {} ± {}", em.estimate.mean, em.estimate.stderr),
    );
    if kernel.is_zero() {
        out.check("exp_moment_zero_kernel", em.estimate.mean == 1.0, format!("{}", em.estimate.mean));
    }
    out.table("duals", tab);

    if phi.center.iter().all(|&c| c == 0.0) {
        let mut samples = Vec::new();
        for &t in &[1.0, 4.0, 16.0] {
            for &r in &[0.0, 1.0, 2.0] {
                let mut x = vec![0.0; d];
                x[0] = r;
                samples.push((t, x.clone(), x));
            }
        }
        let opts = CheckOptions {
            paths: PathConfig {
                n_paths: (pc.n_paths / 10).max(100),
                ..pc
            },
            growth_tol: 2.0,
        };
        let rep = bound_checks(&kernel, &phi, &bf, &samples, &opts)?;
        let mut bt = CsvTable::new(&["inequality", "t", "x_norm", "y_norm", "lhs", "rhs", "ratio"]);
        for r in [Some(&rep.second_moment), Some(&rep.qtilde_vs_i), rep.j_vs_i.as_ref()].into_iter().flatten() {
            ratio_rows(&mut bt, r);
            out.check(
                &format!("bound_{}", r.name),
                r.finite && r.stable,
                format!("sup ratio {} growth {}", r.sup, r.growth),
            );
        }
        out.table("bounds", bt);
    } else {
        out.warnings.push("bound checks need phi centered at the origin; skipped".into());
    }
    Ok(out)
}

/// `lln`, `clt`, `prop` and `moments`.
pub fn study(cfg: &Config, name: &str) -> Result<Outcome> {
    let mut c = cfg.clone();
    c.experiment.mode = match name {
        "lln" => Mode::Lln,
        "clt" => Mode::Clt,
        "prop" => Mode::Prop,
        _ => Mode::Moments,
    };
    let mut out = Outcome::default();
    out.warnings = c.validate()?;
    let rep = experiments::run(&c)?;
    plots(&rep, &mut out);
    out.warnings.extend(rep.failures.iter().map(|f| format!("replica failed: {f}")));
    if rep.inconclusive {
        out.warnings.push("too few samples for the distributional tests; result inconclusive".into());
    }
    out.checks = rep.checks.clone();
    out.tables = rep.tables();
    Ok(out)
}

fn plots(rep: &StatReport, out: &mut Outcome) {
    match rep.mode {
        Mode::Lln => {
            let rows: Vec<_> = rep.estimates.iter().filter(|e| e.quantity == "annealed_mean").collect();
            let t: Vec<f64> = rows.iter().map(|e| e.t).collect();
            let m: Vec<f64> = rows.iter().map(|e| e.mean).collect();
            let tg: Vec<f64> = rows.iter().map(|e| e.target.unwrap_or(f64::NAN)).collect();
            out.svgs.push((
                "lln.svg".into(),
                svg_lines(
                    "T^-1 Y_T(phi)",
                    &[Series { label: "mean", x: &t, y: &m }, Series { label: "target", x: &t, y: &tg }],
                ),
            ));
        }
        Mode::Clt | Mode::Prop => {
            let t_max = rep.samples.iter().map(|s| s.t).fold(f64::NEG_INFINITY, f64::max);
            let v: Vec<f64> = rep.samples.iter().filter(|s| s.t == t_max).map(|s| s.value).collect();
            if !v.is_empty() {
                out.svgs.push(("histogram.svg".into(), svg_histogram("statistic at the largest T", &v, 20)));
            }
        }
        Mode::Moments => {}
    }
}

/// Newest run directory under `root`, by modification time.
pub fn newest_run(root: &Path) -> Result<PathBuf> {
    let mut best: Option<(std::time::SystemTime, PathBuf)> = None;
    for e in std::fs::read_dir(root)? {
        let e = e?;
        if !e.file_type()?.is_dir() || !e.path().join("manifest.toml").exists() {
            continue;
        }
        let m = e.metadata()?.modified()?;
        if best.as_ref().map_or(true, |(b, _)| m > *b) {
            best = Some((m, e.path()));
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| {
        supenv::Error::Config(format!("no run directories under {}", root.display()))
    })
}

/// Collects the checks of an earlier run.
pub fn report(dir: &Path) -> Result<Outcome> {
    let manifest: RunManifest = toml::from_str(&std::fs::read_to_string(dir.join("manifest.toml"))?)
        .map_err(|e| supenv::Error::Config(format!("manifest: {e}")))?;
    let mut out = Outcome::default();
    let checks = dir.join("checks.csv");
    let mut summary = CsvTable::new(&["source", "command", "check", "passed", "detail"]);
    if checks.exists() {
        let t = CsvTable::read(&checks)?;
        for r in &t.rows {
            let passed = r[1] == "true";
            out.check(&r[0], passed, r[2].clone());
            summary.push(vec![
                dir.display().to_string(),
                manifest.command.clone(),
                r[0].clone(),
                r[1].clone(),
                r[2].clone(),
            ]);
        }
    }
    for w in &manifest.warnings {
        out.warnings.push(format!("{}: {w}", manifest.command));
    }
    let mut src = CsvTable::new(&["run", "command", "master_seed", "schema_version", "config_hash", "wall_time_secs"]);
    src.push(vec![
        dir.display().to_string(),
        manifest.command.clone(),
        manifest.master_seed.to_string(),
        manifest.schema_version.to_string(),
        manifest.config_hash.clone(),
        fmt_f64(manifest.wall_time_secs),
    ]);
    out.table("source", src);
    out.table("report", summary);
    Ok(out)
}
