//! Build a short Hilbert hierarchy on a coarse grid and print the residual
//! of every order together with the decay check.

use landau_hilbert::collision::KernelTable;
use landau_hilbert::euler_fluid::EulerInit;
use landau_hilbert::hilbert_expansion::{HilbertBuilder, HilbertConfig};
use landau_hilbert::phase_space::{build_momentum_grid, MomentumGridConfig, SpatialGrid};
use std::sync::Arc;

fn main() {
    let grid = Arc::new(
        build_momentum_grid(&MomentumGridConfig {
            radius: 3.5,
            points_per_axis: 8,
        })
        .expect("valid grid"),
    );
    let table = KernelTable::build(&grid, 1e-3);
    let space = SpatialGrid::new(8, 2.0 * std::f64::consts::PI).expect("valid grid");
    let init = EulerInit {
        density: 1.0,
        temperature: 0.2,
        amplitude: 1e-3,
        mode: 1,
    };
    let states = (0..space.cells).map(|i| init.state_at(space.x(i), space.length)).collect();
    let cfg = HilbertConfig {
        t_final: 0.1,
        snapshot_dt: 0.025,
        ..HilbertConfig::default()
    };
    let hierarchy = HilbertBuilder::new(&table, grid.clone(), space, cfg)
        .build(states)
        .expect("hierarchy builds");
    for r in hierarchy.residuals(&table) {
        let d = hierarchy.decay_check(r.order);
        println!(
            "order {}: residual {:.3e} (relative {:.3e}), decay C {:.3e} / {:.3e} {}",
            r.order,
            r.residual,
            r.relative,
            d.c_fit,
            d.c_max,
            if d.passes { "ok" } else { "FAILS" }
        );
    }
}
