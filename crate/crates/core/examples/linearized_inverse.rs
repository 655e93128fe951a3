//! Build the linearized operator around a drifting Jüttner, invert it on a
//! random microscopic right-hand side, and estimate the coercivity constant.

use landau_hilbert::collision::KernelTable;
use landau_hilbert::equilibrium::CellState;
use landau_hilbert::linearized::{
    apply_l, coercivity_fit, invert_l_on_orthogonal, reference_factor, smooth_sample, LocalMaxwellian, Preconditioner,
    SolveOptions,
};
use landau_hilbert::phase_space::{build_momentum_grid, MomentumGridConfig};
use rand::SeedableRng;
use std::sync::Arc;

fn main() {
    let grid = build_momentum_grid(&MomentumGridConfig {
        radius: 3.5,
        points_per_axis: 12,
    })
    .expect("valid grid");
    let table = KernelTable::build(&grid, 1e-3);
    let state = CellState {
        n0: 1.0,
        u: [0.05, 0.0, -0.02],
        t0: 0.2,
    };
    let cell = LocalMaxwellian::new(state, &grid, &table).expect("admissible state");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let g = cell.micro_part(&grid, &smooth_sample(&grid, &cell, &mut rng));
    let r = apply_l(&table, &grid, &cell, &g);

    // the reference factor is taken at the resting state with the same n0, T0
    let rest = LocalMaxwellian::new(CellState { u: [0.0; 3], ..state }, &grid, &table).expect("admissible state");
    let opts = SolveOptions::default();
    for (name, pre) in [
        ("none", Preconditioner::None),
        ("jacobi", Preconditioner::Jacobi),
        (
            "reference",
            Preconditioner::Reference(Arc::new(reference_factor(&table, &grid, &rest, None).expect("factorisable"))),
        ),
    ] {
        let (x, stats) = invert_l_on_orthogonal(&table, &grid, &cell, &r, &pre, &opts).expect("converged");
        let err: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - b).collect();
        println!(
            "{name:>10}: {:4} iterations, relative error {:.3e}",
            stats.iterations,
            grid.norm(&err) / grid.norm(&g)
        );
    }
    let fit = coercivity_fit(&table, &grid, &cell, 100, 11);
    println!("coercivity estimate delta = {:.4}", fit.delta);
}
