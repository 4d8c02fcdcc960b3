use proptest::prelude::*;
use supenv::config::Config;
use supenv::environment::{GridSpec, NoisePath};
use supenv::kernels::{CorrelationKernel, KernelKind};
use supenv::particles::{init_cloud, BoundaryPolicy};
use supenv::stats::Moments;
use supenv::testfn::{TestFnKind, TestFunction};

fn kernel_kind() -> impl Strategy<Value = KernelKind> {
    prop_oneof![
        Just(KernelKind::Zero),
        Just(KernelKind::CauchyPD),
        Just(KernelKind::PowerCapped),
        Just(KernelKind::SeparableCauchy),
    ]
}

proptest! {
    #[test]
    fn config_round_trips(
        kind in kernel_kind(),
        eps in 0.0..1.0f64,
        alpha in 2.01..10.0f64,
        m in 1usize..12,
        n in 1usize..500,
        seed in any::<u64>(),
        gauss in any::<bool>(),
    ) {
        let mut c = Config::default();
        c.kernel.kind = kind;
        c.kernel.epsilon = eps;
        c.kernel.alpha = alpha;
        c.grid.m = m;
        c.sim.n = n;
        c.seed = seed;
        c.phi.kind = if gauss { TestFnKind::TruncGauss } else { TestFnKind::Bump };
        let (back, _) = Config::from_toml(&c.to_toml()).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn kernel_below_envelope(
        kind in kernel_kind(),
        eps in 0.0..2.0f64,
        alpha in 2.01..8.0f64,
        dim in 3usize..6,
        x in prop::collection::vec(-5.0..5.0f64, 5),
        y in prop::collection::vec(-5.0..5.0f64, 5),
    ) {
        let k = CorrelationKernel::new(kind, eps, alpha, dim).unwrap();
        let (x, y) = (&x[..dim], &y[..dim]);
        let r = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let g = k.evaluate(x, y);
        prop_assert!(g >= 0.0);
        prop_assert!(g <= k.bound(r) * (1.0 + 1e-12));
        prop_assert_eq!(g, k.evaluate(y, x));
    }

    #[test]
    fn cell_lookup_inverts_centers(dim in 1usize..5, m in 1usize..7, l in 0.1..5.0f64, seed in any::<u64>()) {
        let g = GridSpec::new(dim, l, m).unwrap();
        let i = (seed % g.n_cells() as u64) as usize;
        prop_assert_eq!(g.cell_of(&g.center(i)), Some(i));
    }

    #[test]
    fn noise_records_round_trip(steps in 0usize..5, vals in prop::collection::vec(-1e3..1e3f64, 27)) {
        let grid = GridSpec::new(3, 1.0, 3).unwrap();
        let path = NoisePath { grid: grid.clone(), dt: 0.1, increments: vec![vals; steps] };
        let mut bytes = Vec::new();
        path.write_records(&mut bytes).unwrap();
        prop_assert_eq!(bytes.len(), steps * 27 * 8);
        prop_assert_eq!(NoisePath::read_records(&bytes[..], grid, 0.1).unwrap(), path);
    }

    #[test]
    fn test_functions_are_supported_and_nonnegative(
        gauss in any::<bool>(),
        radius in 0.1..4.0f64,
        amp in 0.0..3.0f64,
        x in prop::collection::vec(-6.0..6.0f64, 3),
    ) {
        let kind = if gauss { TestFnKind::TruncGauss } else { TestFnKind::Bump };
        let phi = TestFunction::centered(kind, 3, radius, amp).unwrap();
        let v = phi.eval(&x);
        prop_assert!(v >= 0.0 && v <= amp);
        if phi.r(&x) >= radius {
            prop_assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn reflected_particles_stay_in_box(seed in any::<u64>(), n in 1usize..6) {
        let grid = GridSpec::new(3, 1.0, 2).unwrap();
        let mut cloud = init_cloud(n, &grid, seed, 1 << 20).unwrap();
        // Branching with theta = 1 doubles every particle.
        let up = vec![1.0 / cloud.dt(); grid.n_cells()];
        for _ in 0..3 {
            let before = cloud.count();
            cloud.step(&up, &grid, BoundaryPolicy::Reflect).unwrap();
            prop_assert_eq!(cloud.count(), 2 * before);
        }
        for i in 0..cloud.count() {
            prop_assert!(cloud.particle(i).iter().all(|c| c.abs() <= 1.0));
        }
    }

    #[test]
    fn merged_moments_match_pooled(a in prop::collection::vec(-1e3..1e3f64, 0..40), b in prop::collection::vec(-1e3..1e3f64, 0..40)) {
        let mut m = Moments::from_slice(&a);
        m.merge(&Moments::from_slice(&b));
        let all: Vec<f64> = a.iter().chain(&b).copied().collect();
        let p = Moments::from_slice(&all);
        prop_assert_eq!(m.n, p.n);
        prop_assert!((m.mean() - p.mean()).abs() <= 1e-9 * (1.0 + p.mean().abs()));
        prop_assert!((m.variance() - p.variance()).abs() <= 1e-7 * (1.0 + p.variance()));
    }
}
