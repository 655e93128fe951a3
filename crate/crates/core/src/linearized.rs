//! Linearisation around a local Jüttner state: collision frequency, the
//! σ-norm, `L = -A - K`, `Γ`, the projection onto the null space and an
//! iterative inverse of `L` on its orthogonal complement.
//!
//! With `φ = M^{-1/2} f` and a one-sided lattice gradient `D` the operator
//! `L_D f = M^{-1/2} D^T [ M (σ Dφ - Σ_l w Φ~_kl M_l (Dφ)_l) ]`
//! is symmetric, positive semidefinite and annihilates
//! `span{M^{1/2}, p_i M^{1/2}, p0 M^{1/2}}` exactly. The lattice `L` is the
//! mean of the forward and backward versions; a central gradient would leave
//! odd-even modes almost in the kernel.

use crate::collision::{
    collision_batch, sym_mul, sym_quad, CollisionInput, KernelTable, Sym3,
};
use crate::equilibrium::{CellState, EquilibriumError, Juttner};
use crate::phase_space::{dot3, energy_of, MomentumGrid};
use nalgebra::{DMatrix, DVector, Matrix5, Vector5};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinearizedError {
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error("Gram matrix of the null-space basis is not positive definite (grid too coarse or T0 out of range)")]
    IllConditionedGram,
    #[error("right-hand side is not orthogonal to the null space (relative component {0:.3e})")]
    NonOrthogonal(f64),
    #[error("iteration stalled after {iterations} steps at relative residual {residual:.3e}")]
    Stagnation { iterations: usize, residual: f64 },
    #[error("reference operator is not positive definite")]
    Factorization,
}

/// Macroscopic coefficients of one cell: `P f = M^{1/2}(a + b.p + c p0)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MacroCoeffs {
    pub a: f64,
    pub b: [f64; 3],
    pub c: f64,
}

impl MacroCoeffs {
    pub fn to_array(&self) -> [f64; 5] {
        [self.a, self.b[0], self.b[1], self.b[2], self.c]
    }

    pub fn from_array(v: [f64; 5]) -> Self {
        Self {
            a: v[0],
            b: [v[1], v[2], v[3]],
            c: v[4],
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::from_array(self.to_array().map(|x| x * s))
    }
}

/// `(a, b, c)` on every spatial cell.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProjectionCoefficients {
    pub cells: Vec<MacroCoeffs>,
}

/// Collision invariants `(1, p1, p2, p3, p0)` at node `k`.
#[inline]
pub fn invariants(grid: &MomentumGrid, k: usize) -> [f64; 5] {
    let p = grid.nodes[k];
    [1.0, p[0], p[1], p[2], grid.p0[k]]
}

/// Everything the linearised operators need at one spatial cell.
#[derive(Debug, Clone)]
pub struct LocalMaxwellian {
    pub juttner: Juttner,
    pub m: Vec<f64>,
    pub sqrt_m: Vec<f64>,
    /// σ^{ij}(p_k) = Σ_l w Φ~_kl M_l (forward stencil)
    pub sigma: Vec<Sym3>,
    /// the same for the backward stencil
    pub sigma_back: Vec<Sym3>,
    gram: Matrix5<f64>,
    gram_inv: Matrix5<f64>,
}

impl LocalMaxwellian {
    pub fn new(
        state: CellState,
        grid: &MomentumGrid,
        table: &KernelTable,
    ) -> Result<Self, LinearizedError> {
        Ok(Self::batch(&[state], grid, table)?.remove(0))
    }

    /// Several cells sharing one sweep over the kernel table.
    pub fn batch(
        states: &[CellState],
        grid: &MomentumGrid,
        table: &KernelTable,
    ) -> Result<Vec<Self>, LinearizedError> {
        let n = grid.len();
        let nb = states.len();
        let js: Vec<Juttner> = states
            .iter()
            .map(|s| Juttner::new(*s))
            .collect::<Result<_, _>>()?;
        let ms: Vec<Vec<f64>> = js.par_iter().map(|j| j.on_grid(grid)).collect();
        // forward σ of M and of its mirror image in one sweep
        let nb2 = 2 * nb;
        let mut s = vec![0.0; n * nb2];
        for (b, m) in ms.iter().enumerate() {
            for k in 0..n {
                s[k * nb2 + b] = m[k];
                s[k * nb2 + nb + b] = m[n - 1 - k];
            }
        }
        let (sig, _) = table.contract(&s, nb2, &[], 0);
        js.into_iter()
            .zip(ms)
            .enumerate()
            .map(|(b, (j, m))| {
                let sigma = (0..n).map(|k| sig[k * nb2 + b]).collect();
                let sigma_back = (0..n).map(|k| sig[(n - 1 - k) * nb2 + nb + b]).collect();
                let sqrt_m = grid.nodes.iter().map(|&p| j.sqrt_value(p)).collect();
                Self::assemble(j, m, sqrt_m, sigma, sigma_back, grid)
            })
            .collect()
    }

    fn assemble(
        juttner: Juttner,
        m: Vec<f64>,
        sqrt_m: Vec<f64>,
        sigma: Vec<Sym3>,
        sigma_back: Vec<Sym3>,
        grid: &MomentumGrid,
    ) -> Result<Self, LinearizedError> {
        let mut gram = Matrix5::zeros();
        for i in 0..5 {
            for j in i..5 {
                let v: Vec<f64> = (0..grid.len())
                    .map(|k| {
                        let c = invariants(grid, k);
                        c[i] * c[j] * m[k]
                    })
                    .collect();
                let x = grid.integrate(&v);
                gram[(i, j)] = x;
                gram[(j, i)] = x;
            }
        }
        let chol = gram.cholesky().ok_or(LinearizedError::IllConditionedGram)?;
        let gram_inv = chol.inverse();
        let e = gram.symmetric_eigenvalues();
        let (lo, hi) = e.iter().fold((f64::MAX, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
        if !(lo > 1e-13 * hi) {
            return Err(LinearizedError::IllConditionedGram);
        }
        Ok(Self {
            juttner,
            m,
            sqrt_m,
            sigma,
            sigma_back,
            gram,
            gram_inv,
        })
    }

    pub fn state(&self) -> CellState {
        self.juttner.state
    }

    pub fn t0(&self) -> f64 {
        self.juttner.state.t0
    }

    pub fn gram(&self) -> &Matrix5<f64> {
        &self.gram
    }

    /// `⟨f, χ M^{1/2}⟩` for the five invariants.
    pub fn moments(&self, grid: &MomentumGrid, f: &[f64]) -> [f64; 5] {
        let mut out = [0.0; 5];
        for (i, o) in out.iter_mut().enumerate() {
            let v: Vec<f64> = (0..grid.len())
                .map(|k| invariants(grid, k)[i] * self.sqrt_m[k] * f[k])
                .collect();
            *o = grid.integrate(&v);
        }
        out
    }

    pub fn project(&self, grid: &MomentumGrid, f: &[f64]) -> MacroCoeffs {
        let r = Vector5::from(self.moments(grid, f));
        let x = self.gram_inv * r;
        MacroCoeffs::from_array([x[0], x[1], x[2], x[3], x[4]])
    }

    /// Null-space element whose moments `⟨·, χ M^{1/2}⟩` equal `m`.
    pub fn from_moments(&self, grid: &MomentumGrid, m: [f64; 5]) -> Vec<f64> {
        let x = self.gram_inv * Vector5::from(m);
        self.reconstruct(grid, &MacroCoeffs::from_array([x[0], x[1], x[2], x[3], x[4]]))
    }

    pub fn reconstruct(&self, grid: &MomentumGrid, c: &MacroCoeffs) -> Vec<f64> {
        let v = c.to_array();
        (0..grid.len())
            .map(|k| {
                let chi = invariants(grid, k);
                self.sqrt_m[k] * (0..5).map(|i| v[i] * chi[i]).sum::<f64>()
            })
            .collect()
    }

    /// `P f`
    pub fn p_part(&self, grid: &MomentumGrid, f: &[f64]) -> Vec<f64> {
        self.reconstruct(grid, &self.project(grid, f))
    }

    /// `(I - P) f`
    pub fn micro_part(&self, grid: &MomentumGrid, f: &[f64]) -> Vec<f64> {
        let p = self.p_part(grid, f);
        f.iter().zip(p).map(|(a, b)| a - b).collect()
    }

    /// Size of the null-space component of `f` relative to `|f|`.
    pub fn null_fraction(&self, grid: &MomentumGrid, f: &[f64]) -> f64 {
        let n = grid.norm(f);
        if n == 0.0 {
            return 0.0;
        }
        grid.norm(&self.p_part(grid, f)) / n
    }

    /// `(u0 p̂ - u) / T0` at node `k`, so that `∂_p M^{1/2} = -½ drift M^{1/2}`.
    pub fn drift(&self, grid: &MomentumGrid, k: usize) -> [f64; 3] {
        self.juttner.drift(grid.nodes[k])
    }

    /// Stencil-averaged collision frequency at node `k`.
    pub fn sigma_avg(&self, k: usize) -> Sym3 {
        let (a, b) = (self.sigma[k], self.sigma_back[k]);
        std::array::from_fn(|q| 0.5 * (a[q] + b[q]))
    }

    /// Data of the mirrored state seen by the forward stencil.
    fn mirror_view(&self, grid: &MomentumGrid) -> (Vec<f64>, Vec<f64>, Vec<Sym3>) {
        (
            grid.mirrored(&self.m),
            grid.mirrored(&self.sqrt_m),
            grid.mirrored(&self.sigma_back),
        )
    }

    /// Diagonal of the lattice `-A`, used as a Jacobi preconditioner.
    pub fn jacobi_diagonal(&self, grid: &MomentumGrid) -> Vec<f64> {
        let n = grid.len();
        let plus = diag_forward(grid, &self.m, &self.sqrt_m, &self.sigma);
        let (m, sm, sg) = self.mirror_view(grid);
        let back = diag_forward(grid, &m, &sm, &sg);
        (0..n).map(|k| 0.5 * (plus[k] + back[n - 1 - k])).collect()
    }
}

fn diag_forward(grid: &MomentumGrid, m: &[f64], sqrt_m: &[f64], sigma: &[Sym3]) -> Vec<f64> {
    (0..grid.len())
        .map(|c| {
            let s = 1.0 / sqrt_m[c];
            grad_column(grid, c)
                .iter()
                .map(|(l, g)| {
                    let g = [g[0] * s, g[1] * s, g[2] * s];
                    m[*l] * sym_quad(&sigma[*l], g, g)
                })
                .sum::<f64>()
        })
        .collect()
}

/// Nonzero entries of column `c` of the forward lattice gradient:
/// `(node, vector)`.
pub fn grad_column(grid: &MomentumGrid, c: usize) -> Vec<(usize, [f64; 3])> {
    let n = grid.n;
    let strides = [n * n, n, 1];
    let idx = [c / (n * n), (c / n) % n, c % n];
    let inv = 1.0 / grid.h;
    let mut out: Vec<(usize, [f64; 3])> = Vec::new();
    let mut add = |node: usize, a: usize, v: f64| {
        if let Some(e) = out.iter_mut().find(|e| e.0 == node) {
            e.1[a] += v;
        } else {
            let mut w = [0.0; 3];
            w[a] = v;
            out.push((node, w));
        }
    };
    for a in 0..3 {
        let s = strides[a];
        let i = idx[a];
        for r in i.saturating_sub(1)..(i + 2).min(n) {
            // row r reads (r, r+1), or (r-1, r) on the upper face
            let coef = if r == n - 1 {
                if i == r {
                    1.0
                } else if i + 1 == r {
                    -1.0
                } else {
                    0.0
                }
            } else if i == r {
                -1.0
            } else if i == r + 1 {
                1.0
            } else {
                0.0
            };
            if coef != 0.0 {
                add(c - i * s + r * s, a, coef * inv);
            }
        }
    }
    out
}

/// `L f` for several cells in one pass over the kernel table.
pub fn apply_l_batch(
    table: &KernelTable,
    grid: &MomentumGrid,
    cells: &[&LocalMaxwellian],
    fs: &[&[f64]],
) -> Vec<Vec<f64>> {
    let (a, k) = apply_ak_batch(table, grid, cells, fs);
    a.into_iter()
        .zip(k)
        .map(|(a, k)| a.iter().zip(&k).map(|(x, y)| -x - y).collect())
        .collect()
}

/// `(A f, K f)` for several cells.
pub fn apply_ak_batch(
    table: &KernelTable,
    grid: &MomentumGrid,
    cells: &[&LocalMaxwellian],
    fs: &[&[f64]],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    assert_eq!(cells.len(), fs.len());
    let n = grid.len();
    let nb = fs.len();
    let back: Vec<((Vec<f64>, Vec<f64>, Vec<Sym3>), Vec<f64>)> = (0..nb)
        .into_par_iter()
        .map(|b| (cells[b].mirror_view(grid), grid.mirrored(fs[b])))
        .collect();
    let mut views: Vec<View> = (0..nb)
        .map(|b| View {
            m: &cells[b].m,
            sqrt_m: &cells[b].sqrt_m,
            sigma: &cells[b].sigma,
            f: fs[b],
        })
        .collect();
    views.extend(back.iter().map(|((m, sm, sg), f)| View {
        m,
        sqrt_m: sm,
        sigma: sg,
        f,
    }));
    let (a, k) = ak_forward(table, grid, &views);
    let avg = |x: &[f64], y: &[f64]| -> Vec<f64> { (0..n).map(|i| 0.5 * (x[i] + y[n - 1 - i])).collect() };
    (
        (0..nb).map(|b| avg(&a[b], &a[nb + b])).collect(),
        (0..nb).map(|b| avg(&k[b], &k[nb + b])).collect(),
    )
}

struct View<'a> {
    m: &'a [f64],
    sqrt_m: &'a [f64],
    sigma: &'a [Sym3],
    f: &'a [f64],
}

fn ak_forward(table: &KernelTable, grid: &MomentumGrid, views: &[View]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = grid.len();
    let nb = views.len();
    let dphi: Vec<Vec<[f64; 3]>> = views
        .par_iter()
        .map(|v| {
            let phi: Vec<f64> = v.f.iter().zip(v.sqrt_m).map(|(a, b)| a / b).collect();
            grid.grad_fwd_vec(&phi)
        })
        .collect();
    let mut v = vec![[0.0; 3]; n * nb];
    for b in 0..nb {
        for k in 0..n {
            let m = views[b].m[k];
            let d = dphi[b][k];
            v[k * nb + b] = [m * d[0], m * d[1], m * d[2]];
        }
    }
    let (_, bv) = table.contract(&[], 0, &v, nb);
    (0..nb)
        .into_par_iter()
        .map(|b| {
            let c = &views[b];
            let fa: Vec<[f64; 3]> = (0..n)
                .map(|k| {
                    let s = sym_mul(&c.sigma[k], dphi[b][k]);
                    [c.m[k] * s[0], c.m[k] * s[1], c.m[k] * s[2]]
                })
                .collect();
            let fk: Vec<[f64; 3]> = (0..n)
                .map(|k| {
                    let x = bv[k * nb + b];
                    [c.m[k] * x[0], c.m[k] * x[1], c.m[k] * x[2]]
                })
                .collect();
            let mut da = vec![0.0; n];
            grid.grad_fwd_adjoint(&fa, &mut da);
            let mut dk = vec![0.0; n];
            grid.grad_fwd_adjoint(&fk, &mut dk);
            let a: Vec<f64> = (0..n).map(|k| -da[k] / c.sqrt_m[k]).collect();
            let kk: Vec<f64> = (0..n).map(|k| dk[k] / c.sqrt_m[k]).collect();
            (a, kk)
        })
        .unzip()
}

pub fn apply_l(table: &KernelTable, grid: &MomentumGrid, cell: &LocalMaxwellian, f: &[f64]) -> Vec<f64> {
    apply_l_batch(table, grid, &[cell], &[f]).remove(0)
}

pub fn apply_a(table: &KernelTable, grid: &MomentumGrid, cell: &LocalMaxwellian, f: &[f64]) -> Vec<f64> {
    apply_ak_batch(table, grid, &[cell], &[f]).0.remove(0)
}

pub fn apply_k(table: &KernelTable, grid: &MomentumGrid, cell: &LocalMaxwellian, f: &[f64]) -> Vec<f64> {
    apply_ak_batch(table, grid, &[cell], &[f]).1.remove(0)
}

/// `Γ[f, g] = M^{-1/2} C[M^{1/2} f, M^{1/2} g]` for several (cell, f, g).
pub fn apply_gamma_batch(
    table: &KernelTable,
    grid: &MomentumGrid,
    items: &[(&LocalMaxwellian, &[f64], &[f64])],
) -> Vec<Vec<f64>> {
    let lifted: Vec<(Vec<f64>, Vec<f64>)> = items
        .par_iter()
        .map(|(c, f, g)| {
            (
                f.iter().zip(&c.sqrt_m).map(|(a, b)| a * b).collect(),
                g.iter().zip(&c.sqrt_m).map(|(a, b)| a * b).collect(),
            )
        })
        .collect();
    let inputs: Vec<CollisionInput> = items
        .iter()
        .zip(&lifted)
        .map(|((c, _, _), (f, g))| CollisionInput {
            g: f,
            h: g,
            gauge: Some(&c.m),
        })
        .collect();
    let out = collision_batch(table, grid, &inputs);
    out.into_iter()
        .zip(items)
        .map(|(v, (c, _, _))| v.iter().zip(&c.sqrt_m).map(|(a, b)| a / b).collect())
        .collect()
}

pub fn apply_gamma(
    table: &KernelTable,
    grid: &MomentumGrid,
    cell: &LocalMaxwellian,
    f: &[f64],
    g: &[f64],
) -> Vec<f64> {
    apply_gamma_batch(table, grid, &[(cell, f, g)]).remove(0)
}

/// The displayed closed forms of `A`, `K` and `Γ`, discretised directly with
/// plain lattice derivatives. Used to cross-check the conservative operators.
pub mod explicit {
    use super::*;

    fn half_drift(cell: &LocalMaxwellian, grid: &MomentumGrid) -> Vec<[f64; 3]> {
        (0..grid.len())
            .map(|k| {
                let d = cell.drift(grid, k);
                [0.5 * d[0], 0.5 * d[1], 0.5 * d[2]]
            })
            .collect()
    }

    /// `∂_i(σ^{ij} ∂_j f) - σ^{ij} a_i a_j f / (4 T0²) + ∂_i(σ^{ij} a_j) f / (2 T0)`
    /// with `a = u0 p̂ - u`.
    pub fn a(grid: &MomentumGrid, cell: &LocalMaxwellian, f: &[f64]) -> Vec<f64> {
        let n = grid.len();
        let df = grid.grad_vec(f);
        let hd = half_drift(cell, grid);
        let flux: Vec<[f64; 3]> = (0..n).map(|k| sym_mul(&cell.sigma_avg(k), df[k])).collect();
        let sd: Vec<[f64; 3]> = (0..n).map(|k| sym_mul(&cell.sigma_avg(k), hd[k])).collect();
        let div1 = grid.div(&flux);
        let div2 = grid.div(&sd);
        (0..n)
            .map(|k| div1[k] - sym_quad(&cell.sigma_avg(k), hd[k], hd[k]) * f[k] + div2[k] * f[k])
            .collect()
    }

    /// `(∂_i - a_i/2T0) ∫ Φ^{ij} M^{1/2}(p) M^{1/2}(q) (-a_j(q) f(q)/2T0 - ∂_j f(q)) dq`
    pub fn k(table: &KernelTable, grid: &MomentumGrid, cell: &LocalMaxwellian, f: &[f64]) -> Vec<f64> {
        let n = grid.len();
        let df = grid.grad_vec(f);
        let hd = half_drift(cell, grid);
        let v: Vec<[f64; 3]> = (0..n)
            .map(|k| {
                let s = cell.sqrt_m[k];
                [
                    s * (-hd[k][0] * f[k] - df[k][0]),
                    s * (-hd[k][1] * f[k] - df[k][1]),
                    s * (-hd[k][2] * f[k] - df[k][2]),
                ]
            })
            .collect();
        let (_, b) = table.contract_sym(&[], 0, &v, 1);
        let y: Vec<[f64; 3]> = (0..n)
            .map(|k| {
                let s = cell.sqrt_m[k];
                [s * b[k][0], s * b[k][1], s * b[k][2]]
            })
            .collect();
        let d = grid.div(&y);
        (0..n).map(|k| d[k] - dot3(hd[k], y[k])).collect()
    }

    /// `(∂_i - a_i/2T0) ∫ Φ^{ij} M^{1/2}(q) (∂_j f(p) g(q) - f(p) ∂_j g(q)) dq`
    pub fn gamma(
        table: &KernelTable,
        grid: &MomentumGrid,
        cell: &LocalMaxwellian,
        f: &[f64],
        g: &[f64],
    ) -> Vec<f64> {
        let n = grid.len();
        let df = grid.grad_vec(f);
        let dg = grid.grad_vec(g);
        let hd = half_drift(cell, grid);
        let s: Vec<f64> = (0..n).map(|k| cell.sqrt_m[k] * g[k]).collect();
        let v: Vec<[f64; 3]> = (0..n)
            .map(|k| {
                let m = cell.sqrt_m[k];
                [m * dg[k][0], m * dg[k][1], m * dg[k][2]]
            })
            .collect();
        let (a, b) = table.contract_sym(&s, 1, &v, 1);
        let y: Vec<[f64; 3]> = (0..n)
            .map(|k| {
                let x = sym_mul(&a[k], df[k]);
                [x[0] - f[k] * b[k][0], x[1] - f[k] * b[k][1], x[2] - f[k] * b[k][2]]
            })
            .collect();
        let d = grid.div(&y);
        (0..n).map(|k| d[k] - dot3(hd[k], y[k])).collect()
    }
}

/// Collision frequency matrix at one node (already stored on the cell).
pub fn collision_frequency_sigma(cell: &LocalMaxwellian, k: usize) -> Sym3 {
    cell.sigma_avg(k)
}

/// `|f|_σ` with lattice momentum derivatives.
pub fn sigma_norm(grid: &MomentumGrid, cell: &LocalMaxwellian, f: &[f64]) -> f64 {
    let df = grid.grad_vec(f);
    let inv_t2 = 1.0 / (cell.t0() * cell.t0());
    let v: Vec<f64> = (0..grid.len())
        .map(|k| {
            let ph = grid.p_hat(k);
            let sg = cell.sigma_avg(k);
            sym_quad(&sg, df[k], df[k]) + inv_t2 * sym_quad(&sg, ph, ph) * f[k] * f[k]
        })
        .collect();
    grid.integrate(&v).max(0.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub ortho_tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            ortho_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
}

/// Dense factorisation of a reference operator used as a preconditioner.
pub struct ReferenceFactor {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    pub shift: Option<f64>,
}

impl ReferenceFactor {
    pub fn apply(&self, r: &[f64]) -> Vec<f64> {
        let x = self.chol.solve(&DVector::from_column_slice(r));
        x.as_slice().to_vec()
    }
}

/// Dense matrix of the lattice `L` at one cell (Euclidean coordinates).
pub fn dense_l(table: &KernelTable, grid: &MomentumGrid, cell: &LocalMaxwellian) -> DMatrix<f64> {
    let n = grid.len();
    let plus = dense_forward(table, grid, &cell.m, &cell.sqrt_m, &cell.sigma);
    let (m, sm, sg) = cell.mirror_view(grid);
    let back = dense_forward(table, grid, &m, &sm, &sg);
    let mut out = DMatrix::zeros(n, n);
    for c in 0..n {
        for r in 0..n {
            out[(r, c)] = 0.5 * (plus[(r, c)] + back[(n - 1 - r, n - 1 - c)]);
        }
    }
    // symmetrise away rounding
    let t = out.transpose();
    (out + t) * 0.5
}

fn dense_forward(
    table: &KernelTable,
    grid: &MomentumGrid,
    m: &[f64],
    sqrt_m: &[f64],
    sigma: &[Sym3],
) -> DMatrix<f64> {
    let n = grid.len();
    let w = table.weight;
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|c| {
            let s = 1.0 / sqrt_m[c];
            let gc: Vec<(usize, [f64; 3])> = grad_column(grid, c)
                .into_iter()
                .map(|(l, g)| (l, [g[0] * s, g[1] * s, g[2] * s]))
                .collect();
            // t = Q g_c on all nodes
            let mut t = vec![[0.0; 3]; n];
            for (l, g) in &gc {
                let d = sym_mul(&sigma[*l], *g);
                for a in 0..3 {
                    t[*l][a] += m[*l] * d[a];
                }
            }
            for (k, tk) in t.iter_mut().enumerate() {
                for (l, g) in &gc {
                    if *l == k {
                        continue;
                    }
                    let x = sym_mul(&table.get(k, *l), *g);
                    let f = w * m[k] * m[*l];
                    for a in 0..3 {
                        tk[a] -= f * x[a];
                    }
                }
            }
            let mut out = vec![0.0; n];
            grid.grad_fwd_adjoint(&t, &mut out);
            out.iter_mut().zip(sqrt_m).for_each(|(o, s)| *o /= s);
            out
        })
        .collect();
    let mut mat = DMatrix::zeros(n, n);
    for (c, col) in cols.iter().enumerate() {
        for r in 0..n {
            mat[(r, c)] = col[r];
        }
    }
    mat
}

/// Factor `L_ref + s P_ref` (for `L` solves) or `I + τ L_ref` (for implicit
/// steps), the reference operator taken at `cell`.
pub fn reference_factor(
    table: &KernelTable,
    grid: &MomentumGrid,
    cell: &LocalMaxwellian,
    shift: Option<f64>,
) -> Result<ReferenceFactor, LinearizedError> {
    reference_factor_from_dense(dense_l(table, grid, cell), grid, cell, shift)
}

pub fn reference_factor_from_dense(
    mut l: DMatrix<f64>,
    grid: &MomentumGrid,
    cell: &LocalMaxwellian,
    shift: Option<f64>,
) -> Result<ReferenceFactor, LinearizedError> {
    let n = grid.len();
    match shift {
        Some(tau) => {
            l *= tau;
            for i in 0..n {
                l[(i, i)] += 1.0;
            }
        }
        None => {
            // orthonormal null-space basis in Euclidean coordinates
            let mut q = DMatrix::zeros(n, 5);
            for k in 0..n {
                let chi = invariants(grid, k);
                for i in 0..5 {
                    q[(k, i)] = chi[i] * cell.sqrt_m[k];
                }
            }
            let qr = q.qr();
            let q = qr.q();
            let scale = (0..n).map(|i| l[(i, i)]).sum::<f64>() / n as f64;
            l += (&q * q.transpose()) * scale;
        }
    }
    let chol = nalgebra::Cholesky::new(l).ok_or(LinearizedError::Factorization)?;
    Ok(ReferenceFactor { chol, shift })
}

/// Preconditioner for the projected iterations.
#[derive(Clone)]
pub enum Preconditioner {
    None,
    Jacobi,
    Reference(Arc<ReferenceFactor>),
}

fn euclid_dot(a: &[f64], b: &[f64]) -> f64 {
    crate::phase_space::pairwise_sum(&a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>())
}

/// Solve `(shift? I + τ L : L) u = r` cell by cell with a projected
/// preconditioned conjugate-gradient iteration; all cells share each sweep
/// over the kernel table. For the pure `L` problem the right-hand sides must
/// be orthogonal to the null space and the solutions are returned in `N^⊥`.
pub fn solve_batch(
    table: &KernelTable,
    grid: &MomentumGrid,
    cells: &[&LocalMaxwellian],
    rhs: &[Vec<f64>],
    tau: Option<f64>,
    pre: &Preconditioner,
    opts: &SolveOptions,
) -> Result<(Vec<Vec<f64>>, Vec<SolveStats>), LinearizedError> {
    let nb = cells.len();
    let n = grid.len();
    let project = |c: &LocalMaxwellian, v: &mut Vec<f64>| {
        if tau.is_none() {
            *v = c.micro_part(grid, v);
        }
    };
    let jacobi: Vec<Vec<f64>> = match pre {
        Preconditioner::Jacobi => cells
            .par_iter()
            .map(|c| {
                let d = c.jacobi_diagonal(grid);
                match tau {
                    Some(t) => d.iter().map(|x| 1.0 + t * x).collect(),
                    None => d,
                }
            })
            .collect(),
        _ => Vec::new(),
    };
    let precond = |b: usize, r: &[f64]| -> Vec<f64> {
        match pre {
            Preconditioner::None => r.to_vec(),
            Preconditioner::Jacobi => r.iter().zip(&jacobi[b]).map(|(x, d)| x / d).collect(),
            Preconditioner::Reference(f) => f.apply(r),
        }
    };
    let apply = |dirs: &[&[f64]], idx: &[usize]| -> Vec<Vec<f64>> {
        let cs: Vec<&LocalMaxwellian> = idx.iter().map(|&b| cells[b]).collect();
        let lv = apply_l_batch(table, grid, &cs, dirs);
        match tau {
            Some(t) => lv
                .into_iter()
                .zip(dirs)
                .map(|(l, d)| l.iter().zip(d.iter()).map(|(x, y)| y + t * x).collect())
                .collect(),
            None => lv,
        }
    };

    let mut x = vec![vec![0.0; n]; nb];
    let mut r: Vec<Vec<f64>> = Vec::with_capacity(nb);
    let mut norms = Vec::with_capacity(nb);
    for b in 0..nb {
        let mut rb = rhs[b].clone();
        if tau.is_none() {
            let frac = cells[b].null_fraction(grid, &rb);
            if frac > opts.ortho_tol {
                return Err(LinearizedError::NonOrthogonal(frac));
            }
        }
        project(cells[b], &mut rb);
        norms.push(euclid_dot(&rb, &rb).sqrt());
        r.push(rb);
    }
    let mut z: Vec<Vec<f64>> = (0..nb)
        .map(|b| {
            let mut zb = precond(b, &r[b]);
            project(cells[b], &mut zb);
            zb
        })
        .collect();
    let mut p = z.clone();
    let mut rz: Vec<f64> = (0..nb).map(|b| euclid_dot(&r[b], &z[b])).collect();
    let mut stats = vec![
        SolveStats {
            iterations: 0,
            residual: 0.0
        };
        nb
    ];
    let mut active: Vec<usize> = (0..nb).filter(|&b| norms[b] > 0.0).collect();
    let mut it = 0;
    while !active.is_empty() {
        if it >= opts.max_iter {
            let worst = active
                .iter()
                .map(|&b| euclid_dot(&r[b], &r[b]).sqrt() / norms[b])
                .fold(0.0, f64::max);
            return Err(LinearizedError::Stagnation {
                iterations: it,
                residual: worst,
            });
        }
        it += 1;
        let dirs: Vec<&[f64]> = active.iter().map(|&b| p[b].as_slice()).collect();
        let q = apply(&dirs, &active);
        let mut still = Vec::new();
        for (qi, &b) in q.into_iter().zip(&active) {
            let pq = euclid_dot(&p[b], &qi);
            if !(pq > 0.0) {
                return Err(LinearizedError::Stagnation {
                    iterations: it,
                    residual: euclid_dot(&r[b], &r[b]).sqrt() / norms[b],
                });
            }
            let alpha = rz[b] / pq;
            for k in 0..n {
                x[b][k] += alpha * p[b][k];
                r[b][k] -= alpha * qi[k];
            }
            project(cells[b], &mut r[b]);
            let res = euclid_dot(&r[b], &r[b]).sqrt() / norms[b];
            stats[b] = SolveStats {
                iterations: it,
                residual: res,
            };
            if res <= opts.tol {
                continue;
            }
            let mut zb = precond(b, &r[b]);
            project(cells[b], &mut zb);
            let rz_new = euclid_dot(&r[b], &zb);
            let beta = rz_new / rz[b];
            rz[b] = rz_new;
            for k in 0..n {
                p[b][k] = zb[k] + beta * p[b][k];
            }
            z[b] = zb;
            still.push(b);
        }
        active = still;
    }
    for b in 0..nb {
        project(cells[b], &mut x[b]);
    }
    Ok((x, stats))
}

/// `u ∈ N^⊥` with `L u = r`.
pub fn invert_l_on_orthogonal(
    table: &KernelTable,
    grid: &MomentumGrid,
    cell: &LocalMaxwellian,
    r: &[f64],
    pre: &Preconditioner,
    opts: &SolveOptions,
) -> Result<(Vec<f64>, SolveStats), LinearizedError> {
    let (mut x, s) = solve_batch(table, grid, &[cell], &[r.to_vec()], None, pre, opts)?;
    Ok((x.remove(0), s[0]))
}

/// Velocity weight parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSpec {
    pub n0: u32,
    pub temperature: f64,
    pub ell: u32,
}

impl WeightSpec {
    pub fn validate(&self, max_t0: f64) -> bool {
        self.n0 >= 3 && self.temperature >= max_t0 && self.ell <= 2
    }
}

/// `w_ℓ = (p0)^{2(N0-ℓ)} exp(p0 / (5 T ln(e + t)))`
pub fn weight_value(spec: &WeightSpec, t: f64, p: [f64; 3]) -> f64 {
    let e = energy_of(p);
    let ln = (std::f64::consts::E + t).ln();
    e.powi(2 * (spec.n0 as i32 - spec.ell as i32)) * (e / (5.0 * spec.temperature * ln)).exp()
}

/// `Y = 1 / (5 T (e + t) ln(e + t)^2)`
pub fn rate_y(temperature: f64, t: f64) -> f64 {
    let et = std::f64::consts::E + t;
    1.0 / (5.0 * temperature * et * et.ln().powi(2))
}

/// Smallest sampled ratio `⟨L f, f⟩ / |(I-P) f|²_σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoercivityFit {
    pub delta: f64,
    pub ratios: Vec<f64>,
}

/// `M^{1/2} q(p / sqrt(T0))` with `q` a cubic polynomial whose coefficients
/// are uniform in `[-1, 1]`.
pub fn smooth_sample(grid: &MomentumGrid, cell: &LocalMaxwellian, rng: &mut impl rand::Rng) -> Vec<f64> {
    let scale = 1.0 / cell.t0().sqrt();
    let monomials: Vec<[u32; 3]> = (0..=3u32)
        .flat_map(|a| (0..=3 - a).flat_map(move |b| (0..=3 - a - b).map(move |c| [a, b, c])))
        .collect();
    let coef: Vec<f64> = monomials.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
    (0..grid.len())
        .map(|k| {
            let p = grid.nodes[k];
            let q: f64 = monomials
                .iter()
                .zip(&coef)
                .map(|(e, c)| c * (0..3).map(|i| (scale * p[i]).powi(e[i] as i32)).product::<f64>())
                .sum();
            cell.sqrt_m[k] * q
        })
        .collect()
}

/// Coercivity constant fitted over the micro parts of seeded
/// [`smooth_sample`] draws.
pub fn coercivity_fit(
    table: &KernelTable,
    grid: &MomentumGrid,
    cell: &LocalMaxwellian,
    samples: usize,
    seed: u64,
) -> CoercivityFit {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let fs: Vec<Vec<f64>> = (0..samples)
        .map(|_| cell.micro_part(grid, &smooth_sample(grid, cell, &mut rng)))
        .collect();
    let cells: Vec<&LocalMaxwellian> = vec![cell; samples];
    let refs: Vec<&[f64]> = fs.iter().map(|f| f.as_slice()).collect();
    let lf = apply_l_batch(table, grid, &cells, &refs);
    let ratios: Vec<f64> = fs
        .iter()
        .zip(&lf)
        .map(|(f, l)| grid.inner(l, f) / sigma_norm(grid, cell, f).powi(2))
        .collect();
    CoercivityFit {
        delta: ratios.iter().cloned().fold(f64::INFINITY, f64::min),
        ratios,
    }
}
