//! Evaluate the relativistic Landau kernel on a few momentum pairs and show
//! that it annihilates the relative velocity direction and stays positive
//! semidefinite.

use landau_hilbert::collision::{kernel_phi, mat_to_sym, sym_eigenvalues, sym_mul, sym_norm};
use landau_hilbert::phase_space::{dot3, p_hat, Momentum};

fn main() {
    let pairs = [
        ([0.3, -0.1, 0.2], [-0.4, 0.5, 0.0]),
        ([2.0, 0.0, 0.0], [0.0, 2.0, 0.0]),
        ([1e-3, 0.0, 0.0], [0.0, 0.0, 3.0]),
        ([3.0, 3.0, -3.0], [-3.0, 2.5, 3.0]),
    ];
    println!("{:>28} {:>28} {:>12} {:>12} {:>12}", "p", "q", "|Phi|", "proj", "min eig");
    for (p, q) in pairs {
        let (pm, qm) = (Momentum::new(p), Momentum::new(q));
        let kv = kernel_phi(pm, qm).expect("distinct momenta");
        let s = mat_to_sym(&kv.phi);
        let (a, b) = (p_hat(pm), p_hat(qm));
        let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = sym_mul(&s, d);
        let norm = sym_norm(&s);
        println!(
            "{:>28} {:>28} {:12.4e} {:12.4e} {:12.4e}",
            format!("{p:?}"),
            format!("{q:?}"),
            norm,
            dot3(v, v).sqrt() / (norm * dot3(d, d).sqrt()),
            sym_eigenvalues(&s)[0] / norm
        );
    }
}
