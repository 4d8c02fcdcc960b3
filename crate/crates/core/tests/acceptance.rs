//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line with
//! the measured numbers, then asserts.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use supenv::config::{Config, Mode};
use supenv::duals::{box_potential_mass, dual_expmoment, dual_second_moment, dual_v, green_g, tail_integral, PathConfig};
use supenv::environment::{EnvironmentField, GridSpec};
use supenv::experiments::{self, field_seed, Setup};
use supenv::kernels::{epsilon_threshold, green_integral, CorrelationKernel, KernelKind};
use supenv::particles::{steps_for, BoundaryPolicy};
use supenv::quadrature::QuadConfig;
use supenv::rng::{derive_seed, stream};
use supenv::spde::{
    clt_decomposition, martingale_stat, quenched_v1, sigma_sq, solve_ut_vt, solve_v1, xi_estimate, NoiseOrder,
    SolverOptions,
};
use supenv::stats::{loglog_slope, map_indices, MCEstimate};
use supenv::testfn::{TestFnKind, TestFunction};

use rand::Rng;
use std::sync::{Mutex, MutexGuard};

/// Criteria run one at a time so that the wall-clock budgets measure each
/// run alone.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u32, name: &str, pass: bool, detail: &str, elapsed: Duration) {
    println!(
        "criterion {id:>2} [{name}]: {} ({:.1} s) {detail}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
}

fn base(dim: usize, half_width: f64, m: usize, n: usize) -> Config {
    let mut c = Config::default();
    c.dim = dim;
    c.grid.half_width = half_width;
    c.grid.m = m;
    c.sim.n = n;
    c
}

#[test]
fn c01_dual_factorizes_without_noise() {
    let _guard = serial();
    let start = Instant::now();
    let d = 3;
    let phi = TestFunction::centered(TestFnKind::TruncGauss, d, 3.0, 1.0).unwrap();
    let psi = TestFunction::new(TestFnKind::TruncGauss, vec![0.5, -0.25, 0.0], 4.0, 2.0).unwrap();
    let kernel = CorrelationKernel::zero(d);
    let mut rng = stream(2024, 0);
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for k in 0..10 {
        let t = rng.random_range(0.2..=2.0);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..=1.5)).collect();
        let y: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..=1.5)).collect();
        let cfg = PathConfig {
            n_paths: 100_000,
            dt_path: 0.01,
            seed: derive_seed(7, k),
        };
        let est = dual_v(&phi, &psi, t, &x, &y, &kernel, &cfg).unwrap();
        let exact = phi.potential_closed(t, &x).unwrap() * psi.potential_closed(t, &y).unwrap();
        let z = (est.mean - exact).abs() / est.stderr;
        worst = worst.max(z);
        pass &= est.within(exact, 3.0, 0.0);
    }
    let el = start.elapsed();
    pass &= el < Duration::from_secs(120);
    verdict(1, "dual factorization", pass, &format!("max |z| = {worst:.2} over 10 tuples"), el);
    assert!(pass);
}

#[test]
fn c02_annealed_first_moment() {
    let _guard = serial();
    let start = Instant::now();
    let mut c = base(3, 2.0, 8, 200);
    c.sim.boundary = BoundaryPolicy::Free;
    c.seed = 11;
    let s = Setup::new(&c).unwrap();
    let t = 1.0;
    let steps = steps_for(t, s.dt()).unwrap();
    let ys: Vec<f64> = map_indices(200, |r| {
        let path = s.path(r, steps);
        let mut cloud = s.poisson_cloud(r, 0).unwrap();
        s.occupation(&mut cloud, &path, &[t]).unwrap()[0]
    });
    let est = MCEstimate::from_samples(&ys, c.seed);
    let target = box_potential_mass(&s.phi, c.grid.half_width, t);
    let el = start.elapsed();
    let pass = est.within(target, 3.0, 0.0) && el < Duration::from_secs(300);
    verdict(
        2,
        "annealed first moment",
        pass,
        &format!("particles {:.6} ± {:.6}, oracle {target:.6}", est.mean, est.stderr),
        el,
    );
    assert!(pass);
}

#[test]
fn c03_second_moment() {
    let _guard = serial();
    let start = Instant::now();
    let mut c = base(3, 2.0, 8, 100);
    c.kernel.epsilon = 0.05;
    c.kernel.alpha = 3.0;
    c.sim.boundary = BoundaryPolicy::Free;
    c.seed = 12;
    let s = Setup::new(&c).unwrap();
    let t = 0.5;
    let steps = steps_for(t, s.dt()).unwrap();
    let x0 = s.anchor();
    let y2: Vec<f64> = map_indices(3000, |r| {
        let path = s.path(r, steps);
        let mut cloud = s.point_cloud(&x0, r, 0).unwrap();
        s.occupation(&mut cloud, &path, &[t]).unwrap()[0].powi(2)
    });
    let est = MCEstimate::from_samples(&y2, c.seed);
    let oracle = dual_second_moment(
        &s.phi,
        t,
        &x0,
        &s.kernel,
        &PathConfig {
            n_paths: 40_000,
            dt_path: 0.005,
            seed: 99,
        },
    )
    .unwrap();
    let el = start.elapsed();
    let pass = est.within(oracle.mean, 3.0, oracle.stderr) && el < Duration::from_secs(600);
    verdict(
        3,
        "second moment",
        pass,
        &format!(
            "particles {:.6} ± {:.6}, oracle {:.6} ± {:.6}",
            est.mean, est.stderr, oracle.mean, oracle.stderr
        ),
        el,
    );
    assert!(pass);
}

#[test]
fn c04_exponential_moment_bound() {
    let _guard = serial();
    let start = Instant::now();
    let (q, alpha, d) = (21.0, 3.0, 3);
    let eps = epsilon_threshold(q, alpha, d).unwrap();
    let kernel = CorrelationKernel::new(KernelKind::CauchyPD, eps, alpha, d).unwrap();
    let cfg = PathConfig {
        n_paths: 4000,
        dt_path: 0.002,
        seed: 5,
    };
    let o = vec![0.0; d];
    let e = dual_expmoment(q, &kernel, &o, &o, 20_000.0, &cfg).unwrap();
    let diag_ok = e.tail_diagnostic < 0.01 * e.estimate.mean;
    let bound_ok = e.estimate.mean <= 2.0 + 3.0 * e.estimate.stderr;
    let z = dual_expmoment(q, &CorrelationKernel::zero(d), &o, &o, 20_000.0, &cfg).unwrap();
    let zero_ok = z.estimate.mean == 1.0;
    let pass = diag_ok && bound_ok && zero_ok;
    verdict(
        4,
        "exponential moment",
        pass,
        &format!(
            "eps {eps:.6}, estimate {:.4} ± {:.4}, tail {:.4}, zero kernel {}",
            e.estimate.mean, e.estimate.stderr, e.tail_diagnostic, z.estimate.mean
        ),
        start.elapsed(),
    );
    assert!(pass);
}

#[test]
fn c05_green_integrals() {
    let _guard = serial();
    let start = Instant::now();
    let gi = green_integral(3.0, 3, &QuadConfig::with_rel_tol(1e-10)).unwrap();
    let g1 = green_g(&[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap();
    let e1 = (gi / (6.0 * PI) - 1.0).abs();
    let e2 = (g1 * 4.0 * PI - 1.0).abs();
    let pass = e1 < 1e-3 && e2 < 1e-3;
    verdict(5, "green integrals", pass, &format!("integral {gi} (rel {e1:.1e}), G(1) {g1} (rel {e2:.1e})"), start.elapsed());
    assert!(pass);
}

#[test]
fn c06_tail_integral_regimes() {
    let _guard = serial();
    let start = Instant::now();
    let ts: Vec<f64> = (0..13).map(|k| 10f64.powf(1.0 + 3.0 * k as f64 / 12.0)).collect();
    let slope = |alpha: f64, d: usize| {
        let v: Vec<f64> = ts.iter().map(|&t| tail_integral(alpha, d, t).unwrap()).collect();
        loglog_slope(&ts, &v)
    };
    let a = slope(2.5, 5);
    let b = slope(6.0, 3);
    let pass = (a + 1.25).abs() <= 0.05 && (b + 1.5).abs() <= 0.05;
    verdict(6, "tail regimes", pass, &format!("slopes {a:.4} (want -1.25), {b:.4} (want -1.5)"), start.elapsed());
    assert!(pass);
}

#[test]
fn c07_comparison_principle() {
    let _guard = serial();
    let start = Instant::now();
    let d = 3;
    let grid = GridSpec::new(d, 4.0, 16).unwrap();
    let kernel = CorrelationKernel::new(KernelKind::CauchyPD, 0.05, 3.0, d).unwrap();
    let phi = TestFunction::centered(TestFnKind::Bump, d, 2.0, 1.0).unwrap();
    let (dt, horizon) = (0.05, 4.0);
    let steps = steps_for(horizon, dt).unwrap();
    let field = EnvironmentField::build(grid, kernel, 70, dt, usize::MAX).unwrap();
    let opts = SolverOptions::default();
    let res: Vec<(usize, f64)> = map_indices(100, |p| {
        let path = field.reseeded(derive_seed(70, p as u64)).record(steps);
        let v1 = solve_v1(&phi, &path, horizon, NoiseOrder::Forward, &opts).unwrap();
        let (_, vt) = solve_ut_vt(&phi, &v1, &path, horizon, NoiseOrder::Forward, &opts).unwrap();
        let mut bad = 0;
        let mut worst: f64 = 0.0;
        for (a, b) in v1.values.iter().zip(&vt.values) {
            let tol = 1e-12 * a.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (&v, &w) in a.iter().zip(b) {
                let gap = (-w).max(w - v);
                worst = worst.max(gap);
                if gap > tol {
                    bad += 1;
                }
            }
        }
        (bad, worst)
    });
    let bad: usize = res.iter().map(|r| r.0).sum();
    let worst = res.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let pass = bad == 0;
    verdict(7, "comparison principle", pass, &format!("{bad} violations, max gap {worst:.3e}"), start.elapsed());
    assert!(pass);
}

#[test]
fn c08_discrete_identities() {
    let _guard = serial();
    let start = Instant::now();
    let d = 3;
    let grid = GridSpec::new(d, 4.0, 12).unwrap();
    let phi = TestFunction::centered(TestFnKind::Bump, d, 2.0, 1.0).unwrap();
    let (dt, horizon) = (0.05, 4.0);
    let steps = steps_for(horizon, dt).unwrap();
    let opts = SolverOptions::default();
    let mut worst_clt: f64 = 0.0;
    let mut worst_mart: f64 = 0.0;
    let mut zero_exact = true;
    for kind in [KernelKind::CauchyPD, KernelKind::SeparableCauchy, KernelKind::Zero] {
        let kernel = match kind {
            KernelKind::Zero => CorrelationKernel::zero(d),
            k => CorrelationKernel::new(k, 0.05, 3.0, d).unwrap(),
        };
        let field = EnvironmentField::build(grid.clone(), kernel, 80, dt, usize::MAX).unwrap();
        for p in 0..5u64 {
            let path = field.reseeded(derive_seed(80, p)).record(steps);
            for order in [NoiseOrder::Forward, NoiseOrder::Reversed] {
                let v1 = solve_v1(&phi, &path, horizon, order, &opts).unwrap();
                let (ut, vt) = solve_ut_vt(&phi, &v1, &path, horizon, order, &opts).unwrap();
                let dec = clt_decomposition(&v1, &ut, &vt, &path, horizon, order).unwrap();
                let ms = martingale_stat(&v1, &phi, &path, &field.factor, order).unwrap();
                worst_clt = worst_clt.max(dec.relative_residual());
                worst_mart = worst_mart.max(ms.identity_residual());
                if kind == KernelKind::Zero {
                    zero_exact &= dec.i3 == 0.0 && ms.n_path.iter().all(|&v| v == 0.0);
                }
            }
        }
    }
    let pass = worst_clt < 1e-8 && worst_mart < 1e-8 && zero_exact;
    verdict(
        8,
        "discrete identities",
        pass,
        &format!("clt residual {worst_clt:.2e}, martingale residual {worst_mart:.2e}, zero kernel exact {zero_exact}"),
        start.elapsed(),
    );
    assert!(pass);
}

#[test]
fn c09_quenched_mean() {
    let _guard = serial();
    let start = Instant::now();
    let mut c = base(3, 2.0, 16, 100);
    c.phi.kind = TestFnKind::Bump;
    c.phi.radius = 1.5;
    c.sim.boundary = BoundaryPolicy::Reflect;
    c.seed = 9;
    let s = Setup::new(&c).unwrap();
    let t = 2.0;
    let path = s.path(0, steps_for(t, s.dt()).unwrap());
    let ys: Vec<f64> = map_indices(200, |k| {
        let mut cloud = s.poisson_cloud(0, k).unwrap();
        s.occupation(&mut cloud, &path, &[t]).unwrap()[0]
    });
    let est = MCEstimate::from_samples(&ys, c.seed);
    let target = quenched_v1(&s.phi, &path, &[t], &s.opts).unwrap().masses()[0];
    let annealed = s.annealed_target(t);
    let pass = est.within(target, 3.0, 0.0);
    verdict(
        9,
        "quenched mean",
        pass,
        &format!(
            "clouds {:.6} ± {:.6}, quenched {target:.6} (annealed {annealed:.6})",
            est.mean, est.stderr
        ),
        start.elapsed(),
    );
    assert!(pass);
}

#[test]
fn c10_lln_trend() {
    let _guard = serial();
    let start = Instant::now();
    // A reflecting box keeps the total mass critical and the variance grows
    // with T, so the box is made wide and free instead. A unit bump puts
    // T >= 4 past the r² crossover where the variance starts to decay.
    let mut c = base(3, 12.0, 12, 10);
    c.phi.kind = TestFnKind::Bump;
    c.phi.radius = 1.0;
    c.sim.boundary = BoundaryPolicy::Free;
    c.experiment.mode = Mode::Lln;
    c.experiment.horizons = vec![4.0, 8.0, 16.0];
    c.experiment.n_fields = 128;
    c.experiment.n_clouds = 1;
    c.seed = 10;
    let r = experiments::run(&c).unwrap();
    let mad = r.check_named("mean_abs_dev_decreasing").unwrap();
    let slope = r.check_named("variance_slope_negative").unwrap();
    let lit: Vec<f64> = c
        .experiment
        .horizons
        .iter()
        .map(|&t| r.estimate("abs_dev_of_mean", t).unwrap().mean)
        .collect();
    let el = start.elapsed();
    let pass = mad.passed && slope.passed && r.failures.is_empty() && el < Duration::from_secs(1800);
    verdict(
        10,
        "lln trend",
        pass,
        &format!("mean |dev| {}; variance {}; |mean - target| {lit:?}", mad.detail, slope.detail),
        el,
    );
    assert!(pass);
}

fn clt_config(kind: KernelKind) -> Config {
    let mut c = base(5, 2.5, 8, 20);
    c.kernel.kind = kind;
    c.kernel.epsilon = 0.02;
    c.kernel.alpha = 3.0;
    c.phi.kind = TestFnKind::Bump;
    c.phi.radius = 2.0;
    c.sim.boundary = BoundaryPolicy::Reflect;
    c.experiment.mode = Mode::Clt;
    c.experiment.horizons = vec![8.0];
    c.experiment.n_fields = 1;
    c.experiment.n_clouds = 100;
    c.experiment.ks_level = 0.01;
    c.seed = 13;
    c
}

#[test]
fn c11_clt_shape() {
    let _guard = serial();
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for kind in [KernelKind::SeparableCauchy, KernelKind::Zero] {
        let r = experiments::run(&clt_config(kind)).unwrap();
        let ks = r.check_named("ks_quenched_field0").expect("ks check present");
        pass &= ks.passed && !r.inconclusive && r.failures.is_empty();
        let vm = r.check_named("variance_match").map(|c| c.detail.clone()).unwrap_or_default();
        lines.push(format!("{kind}: {} ({vm})", ks.detail));
    }
    verdict(11, "clt shape", pass, &lines.join("; "), start.elapsed());
    assert!(pass);
}

#[test]
fn c12_variance_plateaus() {
    let _guard = serial();
    let start = Instant::now();
    let d = 5;
    let grid = GridSpec::new(d, 5.5, 11).unwrap();
    let kernel = CorrelationKernel::new(KernelKind::SeparableCauchy, 0.02, 6.0, d).unwrap();
    let phi = TestFunction::centered(TestFnKind::Bump, d, 0.9, 1.0).unwrap();
    let (dt, horizon) = (0.125, 12.0);
    let steps = steps_for(horizon, dt).unwrap();
    let times: Vec<f64> = (1..=24).map(|k| k as f64 * horizon / 24.0).collect();
    let field = EnvironmentField::build(grid, kernel, 120, dt, usize::MAX).unwrap();
    let mut pass = true;
    let mut lines = Vec::new();
    for p in 0..2u64 {
        let path = field.reseeded(derive_seed(120, p)).record(steps);
        let v = quenched_v1(&phi, &path, &times, &SolverOptions::default()).unwrap();
        let s2 = sigma_sq(&v);
        let xi = xi_estimate(&v, &field.factor);
        let ok = s2.is_nondecreasing()
            && xi.is_nondecreasing()
            && s2.last_quarter_fraction() < 0.05
            && xi.last_quarter_fraction() < 0.05;
        pass &= ok;
        lines.push(format!(
            "path {p}: sigma_sq {:.5} (last quarter {:.2}%), xi {:.6} (last quarter {:.2}%)",
            s2.last(),
            100.0 * s2.last_quarter_fraction(),
            xi.last(),
            100.0 * xi.last_quarter_fraction()
        ));
    }
    verdict(12, "variance plateaus", pass, &lines.join("; "), start.elapsed());
    assert!(pass);
}

fn small_study(mode: Mode) -> Config {
    let mut c = base(3, 2.0, 4, 8);
    c.kernel.kind = KernelKind::CauchyPD;
    c.phi.kind = TestFnKind::Bump;
    c.phi.radius = 1.5;
    c.sim.horizon = if mode == Mode::Moments { 0.5 } else { 2.0 };
    c.experiment.mode = mode;
    c.experiment.horizons = vec![1.0, 2.0];
    c.experiment.n_fields = 6;
    c.experiment.n_clouds = 3;
    c.duals.n_paths = 500;
    c.seed = 1313;
    c
}

fn csv_bundle(c: &Config) -> Vec<String> {
    let r = experiments::run(c).unwrap();
    let mut out: Vec<String> = r.tables().iter().map(|(_, t)| t.to_csv_string().unwrap()).collect();
    let (sim, _) = experiments::simulate(c).unwrap();
    out.push(sim.to_csv_string().unwrap());
    out
}

#[test]
fn c13_determinism() {
    let _guard = serial();
    let start = Instant::now();
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let wide = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let mut pass = true;
    let mut lines = Vec::new();
    for mode in [Mode::Lln, Mode::Clt, Mode::Prop, Mode::Moments] {
        let c = small_study(mode);
        let a = one.install(|| csv_bundle(&c));
        let b = one.install(|| csv_bundle(&c));
        let w = wide.install(|| csv_bundle(&c));
        let mut other = c.clone();
        other.seed += 1;
        let o = one.install(|| csv_bundle(&other));
        let ok = a == b && a == w && a != o;
        pass &= ok;
        lines.push(format!("{mode:?} {}", if ok { "identical" } else { "differs" }));
    }
    // Field seeds are what tie a replica to its environment.
    pass &= field_seed(1313, 0) != field_seed(1314, 0);
    verdict(13, "determinism", pass, &lines.join(", "), start.elapsed());
    assert!(pass);
}
