//! Sample drifting Jüttner distributions on the momentum grid and compare
//! their quadrature moments with the closed forms. The box truncates the
//! hotter states visibly.

use landau_hilbert::equilibrium::{fluid_moment_check, CellState, Juttner};
use landau_hilbert::phase_space::{build_momentum_grid, MomentumGridConfig};

fn main() {
    let grid = build_momentum_grid(&MomentumGridConfig {
        radius: 3.5,
        points_per_axis: 16,
    })
    .expect("valid grid");
    println!("{:>6} {:>18} {:>10} {:>10} {:>12} {:>12} {:>12}", "T0", "u", "P0", "e0", "density", "pressure", "energy");
    for (t0, u) in [(0.2, [0.0; 3]), (0.2, [0.1, 0.0, -0.05]), (0.3, [0.0, 0.2, 0.0]), (0.5, [0.1, 0.1, 0.1])] {
        let state = CellState { n0: 1.0, u, t0 };
        let j = Juttner::new(state).expect("admissible state");
        let r = fluid_moment_check(&state, &grid).expect("admissible state");
        println!(
            "{t0:6.2} {:>18} {:10.5} {:10.5} {:12.3e} {:12.3e} {:12.3e}",
            format!("{u:?}"),
            j.pressure(),
            j.energy_density(),
            r.density,
            r.pressure,
            r.energy
        );
    }
}
