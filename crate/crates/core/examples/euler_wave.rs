//! Evolve a small acoustic wave under the relativistic Euler equations with
//! the analytic and the lattice closures and report conservation.

use landau_hilbert::euler_fluid::{Closure, EulerInit, EulerSolver};
use landau_hilbert::phase_space::{build_momentum_grid, MomentumGridConfig, SpatialGrid};
use std::sync::Arc;

fn main() {
    let space = SpatialGrid::new(32, 2.0 * std::f64::consts::PI).expect("valid grid");
    let init = EulerInit {
        density: 1.0,
        temperature: 0.2,
        amplitude: 1e-3,
        mode: 1,
    };
    let lattice = Arc::new(
        build_momentum_grid(&MomentumGridConfig {
            radius: 3.5,
            points_per_axis: 12,
        })
        .expect("valid grid"),
    );
    for (name, closure) in [("analytic", Closure::Analytic), ("lattice", Closure::Lattice(lattice))] {
        let solver = EulerSolver::new(space, closure, 0.4);
        let u0 = solver.initial(&init).expect("admissible data");
        let dt = 1.0 / (1.0 / solver.max_dt()).ceil();
        let history = solver.run(&u0, dt, 1.0).expect("smooth run");
        let last = history.states.last().expect("non-empty history");
        let (a, b) = (solver.totals(&u0), solver.totals(last));
        let drift = (0..5).map(|i| (b[i] - a[i]).abs()).fold(0.0, f64::max);
        let umax = last.primitive.iter().map(|s| s.u[0].abs()).fold(0.0, f64::max);
        println!(
            "{name:>8}: {} steps, max|u1| at t = {:.2}: {umax:.3e}, conservation drift {drift:.2e}",
            history.states.len() - 1,
            last.t
        );
    }
}
