//! Apply the discrete collision operator to a perturbed Jüttner and print
//! the five invariant moments of the result, with and without the
//! equilibrium gauge.

use landau_hilbert::collision::{collision_bilinear, moments5, KernelTable};
use landau_hilbert::equilibrium::{CellState, Juttner};
use landau_hilbert::phase_space::{build_momentum_grid, MomentumGridConfig};

fn main() {
    let grid = build_momentum_grid(&MomentumGridConfig {
        radius: 3.5,
        points_per_axis: 12,
    })
    .expect("valid grid");
    let table = KernelTable::build(&grid, 1e-3);
    let m = Juttner::new(CellState {
        n0: 1.0,
        u: [0.05, 0.0, -0.02],
        t0: 0.2,
    })
    .expect("admissible state")
    .on_grid(&grid);
    let g: Vec<f64> = grid
        .nodes
        .iter()
        .zip(&m)
        .map(|(p, mk)| mk * (1.0 + 0.2 * (p[0] - p[1] * p[2]).sin()))
        .collect();
    let names = ["mass", "p1", "p2", "p3", "energy"];
    for (label, gauge) in [("gauged at M", Some(m.as_slice())), ("plain", None)] {
        let c = collision_bilinear(&table, &grid, &g, &g, gauge);
        let r = moments5(&grid, &c);
        let peak = c.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        println!("{label}: max|C[g,g]| = {peak:.4e}");
        for (n, v) in names.iter().zip(r) {
            println!("  {n:>6} {v:12.3e}");
        }
    }
    let cmm = collision_bilinear(&table, &grid, &m, &m, Some(&m));
    println!("max|C[M,M]| gauged at M = {:.3e}", cmm.iter().fold(0.0f64, |a, x| a.max(x.abs())));
}
