//! Relativistic Landau collision machinery, Hilbert expansion around the
//! relativistic Euler flow, and a stiff remainder solver used to measure the
//! hydrodynamic limit on a 1D torus times a 3D momentum box.

// `!(x > 0.0)` rejects NaN on purpose; index loops mirror the formulas
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod collision;
pub mod config;
pub mod equilibrium;
pub mod euler_fluid;
pub mod harness;
pub mod hilbert_expansion;
pub mod linearized;
pub mod phase_space;
pub mod remainder_solver;
