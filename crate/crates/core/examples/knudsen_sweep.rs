//! Run a reduced Knudsen sweep: build a coarse backbone, solve for the
//! remainder at three values of epsilon and fit the convergence slope.

use landau_hilbert::collision::KernelTable;
use landau_hilbert::euler_fluid::EulerInit;
use landau_hilbert::hilbert_expansion::{HilbertBuilder, HilbertConfig};
use landau_hilbert::phase_space::{build_momentum_grid, MomentumGridConfig, SpatialGrid};
use landau_hilbert::remainder_solver::{knudsen_sweep, SolverConfig, SolverContext, SweepConfig};
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
    let t_final = 0.1;
    let hcfg = HilbertConfig {
        t_final,
        snapshot_dt: 0.025,
        ..HilbertConfig::default()
    };
    let backbone = HilbertBuilder::new(&table, grid.clone(), space, hcfg)
        .build(states)
        .expect("hierarchy builds")
        .backbone();
    let scfg = SolverConfig {
        t_final,
        weight_temperature: 1.05 * 0.2,
        ..SolverConfig::default()
    };
    let ctx = SolverContext::new(&table, grid, Arc::new(backbone), scfg).expect("valid solver setup");
    let sweep = SweepConfig {
        epsilons: vec![0.1, 0.05, 0.025],
        dt_halving: false,
    };
    let result = knudsen_sweep(&ctx, &sweep, |run| {
        println!(
            "epsilon {:6}: sup_t H2 {:.4e}, max E {:.4e}, min F {:.3e}",
            run.epsilon, run.sup_h2, run.max_e, run.min_f
        )
    })
    .expect("sweep runs");
    match result.slope {
        Some(s) => println!("log-log slope {s:.3}"),
        None => println!("slope undefined"),
    }
}
