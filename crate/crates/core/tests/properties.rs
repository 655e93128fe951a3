//! Structural invariants checked on random inputs.

use landau_hilbert::collision::{
    collision_bilinear, kernel_phi, mat_to_sym, moments5, sym_eigenvalues, sym_mul, sym_norm, KernelTable,
};
use landau_hilbert::config::RunConfig;
use landau_hilbert::equilibrium::{CellState, Juttner};
use landau_hilbert::euler_fluid::{recover_analytic, Closure, EulerInit, EulerSolver};
use landau_hilbert::linearized::{apply_l_batch, LocalMaxwellian};
use landau_hilbert::phase_space::{build_momentum_grid, dot3, p_hat, Momentum, MomentumGrid, MomentumGridConfig, SpatialGrid};
use landau_hilbert::remainder_solver::loglog_slope;
use proptest::prelude::*;
use std::sync::OnceLock;

fn small() -> &'static (MomentumGrid, KernelTable) {
    static CELL: OnceLock<(MomentumGrid, KernelTable)> = OnceLock::new();
    CELL.get_or_init(|| {
        let g = build_momentum_grid(&MomentumGridConfig {
            radius: 3.5,
            points_per_axis: 8,
        })
        .unwrap();
        let t = KernelTable::build(&g, 1e-3);
        (g, t)
    })
}

fn state() -> impl Strategy<Value = CellState> {
    (0.5..2.0f64, prop::array::uniform3(-0.15..0.15f64), 0.15..0.6f64).prop_map(|(n0, u, t0)| CellState { n0, u, t0 })
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_annihilates_relative_velocity_and_is_psd(
        p in prop::array::uniform3(-8.0..8.0f64),
        q in prop::array::uniform3(-8.0..8.0f64),
    ) {
        let (pm, qm) = (Momentum::new(p), Momentum::new(q));
        prop_assume!(dot3([p[0] - q[0], p[1] - q[1], p[2] - q[2]], [p[0] - q[0], p[1] - q[1], p[2] - q[2]]) > 1e-6);
        let kv = kernel_phi(pm, qm).unwrap();
        let s = mat_to_sym(&kv.phi);
        let n = sym_norm(&s);
        let (a, b) = (p_hat(pm), p_hat(qm));
        let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = sym_mul(&s, d);
        prop_assert!(dot3(v, v).sqrt() <= 1e-10 * n * dot3(d, d).sqrt());
        prop_assert!(sym_eigenvalues(&s)[0] >= -1e-12 * n);
    }

    #[test]
    fn kernel_is_symmetric_in_its_arguments(
        p in prop::array::uniform3(-4.0..4.0f64),
        q in prop::array::uniform3(-4.0..4.0f64),
    ) {
        let (pm, qm) = (Momentum::new(p), Momentum::new(q));
        prop_assume!(kernel_phi(pm, qm).is_ok());
        let a = mat_to_sym(&kernel_phi(pm, qm).unwrap().phi);
        let b = mat_to_sym(&kernel_phi(qm, pm).unwrap().phi);
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        prop_assert!(max_abs(&d) <= 1e-12 * sym_norm(&a));
    }

    #[test]
    fn juttner_is_positive_and_square_root_consistent(s in state(), p in prop::array::uniform3(-3.0..3.0f64)) {
        let j = Juttner::new(s).unwrap();
        let v = j.value(p);
        prop_assert!(v > 0.0);
        prop_assert!((j.sqrt_value(p).powi(2) - v).abs() <= 1e-12 * v);
    }

    #[test]
    fn analytic_recovery_inverts_the_conserved_map(s in state()) {
        let u = Closure::Analytic.conserved(&s).unwrap();
        let r = recover_analytic(&u, None).unwrap();
        prop_assert!((r.n0 - s.n0).abs() <= 1e-9 * s.n0);
        prop_assert!((r.t0 - s.t0).abs() <= 1e-9 * s.t0);
        for a in 0..3 {
            prop_assert!((r.u[a] - s.u[a]).abs() <= 1e-9);
        }
    }

    #[test]
    fn loglog_slope_recovers_power_laws(c in 0.01..100.0f64, k in -3.0..3.0f64) {
        let x = [0.1f64, 0.05, 0.025, 0.0125];
        let y: Vec<f64> = x.iter().map(|e| c * e.powf(k)).collect();
        prop_assert!((loglog_slope(&x, &y).unwrap() - k).abs() < 1e-10);
    }

    #[test]
    fn config_round_trips_through_toml(
        seed in 0..=i64::MAX as u64,
        cells in 8usize..64,
        radius in 2.0..8.0f64,
        e0 in 1e-3..0.5f64,
        ratios in prop::collection::vec(0.2..0.9f64, 2..5),
    ) {
        let mut cfg = RunConfig { seed, ..RunConfig::default() };
        cfg.space.cells = cells;
        cfg.momentum.radius = radius;
        let mut eps = vec![e0];
        for r in ratios {
            eps.push(eps[eps.len() - 1] * r);
        }
        cfg.sweep.epsilons = eps;
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn collisions_conserve_the_invariants(s in state(), amp in 0.0..0.5f64, k in 0.5..2.0f64) {
        let (g, t) = small();
        let m = Juttner::new(s).unwrap().on_grid(g);
        let f: Vec<f64> = g.nodes.iter().zip(&m).map(|(p, mk)| mk * (1.0 + amp * (k * p[0] + p[2]).cos())).collect();
        let en: Vec<f64> = g.nodes.iter().enumerate().map(|(i, _)| g.p0[i] * f[i]).collect();
        let scale = g.integrate(&en);
        for gauge in [None, Some(m.as_slice())] {
            let c = collision_bilinear(t, g, &f, &f, gauge);
            for r in moments5(g, &c) {
                prop_assert!(r.abs() <= 1e-8 * scale);
            }
        }
    }

    #[test]
    fn gauged_collision_of_a_maxwellian_vanishes(s in state()) {
        let (g, t) = small();
        let m = Juttner::new(s).unwrap().on_grid(g);
        let c = collision_bilinear(t, g, &m, &m, Some(&m));
        prop_assert!(max_abs(&c) <= 1e-14 * max_abs(&m));
    }

    #[test]
    fn linearized_operator_is_symmetric_and_nonnegative(
        s in state(),
        a in prop::collection::vec(-1.0..1.0f64, 8),
    ) {
        let (g, t) = small();
        let cell = LocalMaxwellian::new(s, g, t).unwrap();
        let poly = |c: &[f64], k: usize| {
            let p = g.nodes[k];
            cell.sqrt_m[k] * (c[0] + c[1] * p[0] + c[2] * p[1] * p[2] + c[3] * p[0] * p[0] - c[2] * p[2])
        };
        let f: Vec<f64> = (0..g.len()).map(|k| poly(&a[..4], k)).collect();
        let h: Vec<f64> = (0..g.len()).map(|k| poly(&a[4..], k)).collect();
        let l = apply_l_batch(t, g, &[&cell, &cell], &[&f, &h]);
        let scale = g.norm(&l[0]) * g.norm(&h) + g.norm(&f) * g.norm(&l[1]) + 1e-300;
        prop_assert!((g.inner(&l[0], &h) - g.inner(&f, &l[1])).abs() <= 1e-10 * scale);
        prop_assert!(g.inner(&l[0], &f) >= -1e-10 * g.norm(&l[0]) * g.norm(&f));
    }

    #[test]
    fn euler_run_conserves_totals(amp in 1e-4..1e-2f64, mode in 1usize..3, t in 0.15..0.4f64) {
        let space = SpatialGrid::new(16, 2.0 * std::f64::consts::PI).unwrap();
        let solver = EulerSolver::new(space, Closure::Analytic, 0.4);
        let init = EulerInit { density: 1.0, temperature: t, amplitude: amp, mode };
        let u0 = solver.initial(&init).unwrap();
        let h = solver.run(&u0, solver.max_dt(), 0.3).unwrap();
        let (a, b) = (solver.totals(&u0), solver.totals(h.states.last().unwrap()));
        for i in 0..5 {
            prop_assert!((a[i] - b[i]).abs() <= 1e-12 * (1.0 + a[i].abs()));
        }
    }
}
