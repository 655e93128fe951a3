//! Hilbert expansion coefficients `F_0 … F_{2k-1}` over a smooth Euler
//! backbone, the remainder source `S`, and a compact binary store for the
//! remainder solver.
//!
//! Coefficients live on time snapshots spaced `snapshot_dt`. Each order is
//! split as `F_n / M^{1/2} = M^{1/2}(χ·y_n) + μ_n` with `χ = (1, p, p0)`;
//! `μ_n` comes from a projected `L` solve and `y_n` from a linear
//! conservation system integrated alongside the backbone.

use crate::collision::KernelTable;
use crate::equilibrium::CellState;
use crate::euler_fluid::{
    chi, dlogm_coeffs, lagrange_weights, lattice_moments, prim_of, state_of, stencil4, Closure,
    Cons, EulerError, EulerHistory, EulerSolver, EulerState, Prim,
};
use crate::linearized::{
    apply_gamma_batch, apply_l_batch, reference_factor, LinearizedError, LocalMaxwellian,
    MacroCoeffs, Preconditioner, ProjectionCoefficients, SolveOptions,
};
use crate::phase_space::{DistField, MomentumGrid, SpatialGrid};
use nalgebra::{Matrix5, Vector5};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HilbertError {
    #[error(transparent)]
    Euler(#[from] EulerError),
    #[error("order {order}: {source}")]
    Solve {
        order: usize,
        source: LinearizedError,
    },
    #[error(transparent)]
    Linearized(#[from] LinearizedError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value in the order-{0} macro system")]
    NonFinite(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("coefficient file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HilbertConfig {
    pub k: usize,
    pub decay_exponent: f64,
    pub snapshot_dt: f64,
    /// macro steps per snapshot interval
    pub substeps: usize,
    pub t_final: f64,
    #[serde(skip)]
    pub solve: SolveOptions,
}

impl Default for HilbertConfig {
    fn default() -> Self {
        Self {
            k: 2,
            decay_exponent: 0.9,
            snapshot_dt: 0.05,
            substeps: 2,
            t_final: 0.5,
            solve: SolveOptions::default(),
        }
    }
}

impl HilbertConfig {
    pub fn snapshots(&self) -> usize {
        (self.t_final / self.snapshot_dt).round() as usize + 1
    }

    /// Spacing of the stored Euler states (half a macro step).
    pub fn euler_dt(&self) -> f64 {
        self.snapshot_dt / (2 * self.substeps) as f64
    }

    pub fn validate(&self) -> Result<(), HilbertError> {
        if self.k < 2 {
            return Err(HilbertError::Config(format!("hilbert.k = {} < 2", self.k)));
        }
        if !(self.decay_exponent > 0.0 && self.decay_exponent < 1.0) {
            return Err(HilbertError::Config("hilbert.decay_exponent must lie in (0,1)".into()));
        }
        if !(self.snapshot_dt > 0.0) || self.substeps == 0 {
            return Err(HilbertError::Config("snapshot spacing must be positive".into()));
        }
        let ratio = self.t_final / self.snapshot_dt;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(HilbertError::Config(
                "t_final must be a multiple of the snapshot spacing".into(),
            ));
        }
        if self.snapshots() < 5 {
            return Err(HilbertError::Config("need at least five snapshots".into()));
        }
        Ok(())
    }
}

/// One coefficient `F_n` at one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionCoefficient {
    pub n: usize,
    pub t: f64,
    pub field: DistField,
    pub macro_: ProjectionCoefficients,
    pub micro: DistField,
}

impl ExpansionCoefficient {
    /// `F_n / M^{1/2}`
    pub fn scaled(&self, cells: &[LocalMaxwellian]) -> DistField {
        let mut out = self.field.clone();
        for (i, c) in cells.iter().enumerate() {
            out.cell_mut(i)
                .iter_mut()
                .zip(&c.sqrt_m)
                .for_each(|(x, s)| *x /= s);
        }
        out
    }

    /// Largest relative mismatch between `F_n/M^{1/2}` and macro + micro.
    pub fn reconstruction_defect(&self, grid: &MomentumGrid, cells: &[LocalMaxwellian]) -> f64 {
        let fbar = self.scaled(cells);
        let mut worst = 0.0f64;
        for (i, c) in cells.iter().enumerate() {
            let p = c.reconstruct(grid, &self.macro_.cells[i]);
            let r: Vec<f64> = (0..grid.len())
                .map(|k| fbar.cell(i)[k] - p[k] - self.micro.cell(i)[k])
                .collect();
            let s = grid.norm(fbar.cell(i)).max(f64::MIN_POSITIVE);
            worst = worst.max(grid.norm(&r) / s);
        }
        worst
    }

    /// Worst null-space fraction of the micro part over cells.
    pub fn micro_orthogonality(&self, grid: &MomentumGrid, cells: &[LocalMaxwellian]) -> f64 {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| c.null_fraction(grid, self.micro.cell(i)))
            .fold(0.0, f64::max)
    }
}

/// `F_0 = M` at every cell.
pub fn build_f0(cells: &[LocalMaxwellian], t: f64) -> ExpansionCoefficient {
    let nodes = cells.first().map_or(0, |c| c.m.len());
    let field = DistField::from_cells(cells.iter().map(|c| c.m.clone()).collect());
    ExpansionCoefficient {
        n: 0,
        t,
        field,
        macro_: ProjectionCoefficients {
            cells: vec![MacroCoeffs::from_array([1.0, 0.0, 0.0, 0.0, 0.0]); cells.len()],
        },
        micro: DistField::zeros(cells.len(), nodes),
    }
}

/// Backbone quantities at one snapshot.
#[derive(Debug, Clone)]
pub struct Frame {
    pub t: f64,
    pub cells: Vec<LocalMaxwellian>,
    /// `∂_t W` from the Euler equations
    pub wt: Vec<Prim>,
    /// `d log M = χ·(C dW)`
    pub dlog: Vec<Matrix5<f64>>,
    /// `∫ χχ^T M` and `∫ χχ^T p̂1 M`
    pub gram_u: Vec<Matrix5<f64>>,
    pub gram_f: Vec<Matrix5<f64>>,
}

impl Frame {
    pub fn states(&self) -> Vec<CellState> {
        self.cells.iter().map(|c| c.state()).collect()
    }

    /// `∂_t log M` at every node of cell `i`.
    pub fn dt_log_m(&self, grid: &MomentumGrid, i: usize) -> Vec<f64> {
        let v = self.dlog[i] * Vector5::from(self.wt[i]);
        (0..grid.len()).map(|k| chi_dot(grid, k, v.as_slice())).collect()
    }
}

pub fn chi_dot(grid: &MomentumGrid, k: usize, v: &[f64]) -> f64 {
    let c = chi(grid, k);
    c[0] * v[0] + c[1] * v[1] + c[2] * v[2] + c[3] * v[3] + c[4] * v[4]
}

/// Derivative weights of the Lagrange interpolant through nodes `0..k` at `s`.
pub fn lagrange_derivative_weights(k: usize, s: f64) -> Vec<f64> {
    (0..k)
        .map(|i| {
            let mut total = 0.0;
            for m in (0..k).filter(|&m| m != i) {
                let mut prod = 1.0 / (i as f64 - m as f64);
                for l in (0..k).filter(|&l| l != i && l != m) {
                    prod *= (s - l as f64) / (i as f64 - l as f64);
                }
                total += prod;
            }
            total
        })
        .collect()
}

/// Five-point stencil (start index, weights) for `d/dt` at sample `s`.
fn time_stencil(len: usize, s: usize, dt: f64) -> (usize, Vec<f64>) {
    let start = s.saturating_sub(2).min(len - 5);
    let w = lagrange_derivative_weights(5, (s - start) as f64)
        .into_iter()
        .map(|x| x / dt)
        .collect();
    (start, w)
}

/// Linear conservation system `∂_t U + ∂_x(G_F G_U^{-1} U + s) = -(ν/h)Δ⁴U`
/// with `U = G_U y`, integrated by RK4. `coeffs[j]` holds `(G_U, G_F)` per cell
/// at time `j·dt/2`; `source(t)` gives `s` per cell. Returns `U` after every
/// full step (index 0 is the initial value).
pub fn integrate_macro<S>(
    space: &SpatialGrid,
    dissipation: f64,
    dt: f64,
    coeffs: &[Vec<(Matrix5<f64>, Matrix5<f64>)>],
    source: S,
    u0: Vec<Cons>,
) -> Result<Vec<Vec<Cons>>, HilbertError>
where
    S: Fn(f64) -> Vec<Cons>,
{
    let steps = (coeffs.len() - 1) / 2;
    let n = space.cells;
    let nu = dissipation / space.h();
    let inverses: Vec<Vec<Matrix5<f64>>> = coeffs
        .iter()
        .map(|row| {
            row.iter()
                .map(|(gu, _)| gu.try_inverse().ok_or(HilbertError::NonFinite(0)))
                .collect::<Result<_, _>>()
        })
        .collect::<Result<_, _>>()?;
    let rhs = |j: usize, u: &[Cons]| -> Vec<Cons> {
        let s = source(j as f64 * 0.5 * dt);
        let flux: Vec<Cons> = (0..n)
            .map(|i| {
                let y = inverses[j][i] * Vector5::from(u[i]);
                let f = coeffs[j][i].1 * y;
                [
                    f[0] + s[i][0],
                    f[1] + s[i][1],
                    f[2] + s[i][2],
                    f[3] + s[i][3],
                    f[4] + s[i][4],
                ]
            })
            .collect();
        let mut out = vec![[0.0; 5]; n];
        for a in 0..5 {
            let fc: Vec<f64> = flux.iter().map(|v| v[a]).collect();
            let uc: Vec<f64> = u.iter().map(|v| v[a]).collect();
            let d = space.d1(&fc);
            let d4 = space.delta4(&uc);
            for i in 0..n {
                out[i][a] = -d[i] - nu * d4[i];
            }
        }
        out
    };
    let axpy = |u: &[Cons], k: &[Cons], c: f64| -> Vec<Cons> {
        u.iter()
            .zip(k)
            .map(|(a, b)| {
                let mut v = *a;
                for q in 0..5 {
                    v[q] += c * b[q];
                }
                v
            })
            .collect()
    };
    let mut out = vec![u0.clone()];
    let mut u = u0;
    for step in 0..steps {
        let j = 2 * step;
        let k1 = rhs(j, &u);
        let k2 = rhs(j + 1, &axpy(&u, &k1, 0.5 * dt));
        let k3 = rhs(j + 1, &axpy(&u, &k2, 0.5 * dt));
        let k4 = rhs(j + 2, &axpy(&u, &k3, dt));
        for i in 0..n {
            for a in 0..5 {
                u[i][a] += dt / 6.0 * (k1[i][a] + 2.0 * k2[i][a] + 2.0 * k3[i][a] + k4[i][a]);
            }
        }
        if !u.iter().flatten().all(|x| x.is_finite()) {
            return Err(HilbertError::NonFinite(0));
        }
        out.push(u.clone());
    }
    Ok(out)
}

/// `Σ_i h U_i^T G_U^{-1} U_i`, conserved by the dissipation-free system with
/// frozen coefficients.
pub fn macro_energy(space: &SpatialGrid, gram_u: &[Matrix5<f64>], u: &[Cons]) -> f64 {
    let e: Vec<f64> = u
        .iter()
        .zip(gram_u)
        .map(|(v, g)| {
            let x = Vector5::from(*v);
            let y = g.try_inverse().expect("Gram matrix is invertible") * x;
            x.dot(&y)
        })
        .collect();
    space.integrate(&e)
}

/// Result of checking `|F_n| ≤ C (1+t)^{n-1} M^β` over the snapshots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayReport {
    pub order: usize,
    pub exponent: f64,
    /// constant fitted on the first half of the window
    pub c_fit: f64,
    /// largest ratio over the whole window
    pub c_max: f64,
    /// (snapshot, cell, node) of the largest ratio
    pub argmax: (usize, usize, usize),
    /// argmax sits on a face of the momentum box
    pub at_boundary: bool,
    pub passes: bool,
}

/// Per-order hierarchy residual, measured after division by `M^{1/2}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderResidual {
    pub order: usize,
    pub residual: f64,
    pub scale: f64,
    pub relative: f64,
    /// only the null-space component is checked (top order)
    pub projected: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BuildStats {
    pub solves: usize,
    pub max_iterations: usize,
    pub max_residual: f64,
}

/// All built orders over the snapshot window.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub config: HilbertConfig,
    pub space: SpatialGrid,
    pub grid: Arc<MomentumGrid>,
    pub history: EulerHistory,
    pub frames: Vec<Frame>,
    /// `orders[n][s]`
    pub orders: Vec<Vec<ExpansionCoefficient>>,
    /// micro-flux sources `∫ χ p̂1 M^{1/2} μ_n` per order, snapshot and cell
    pub sources: Vec<Vec<Vec<Cons>>>,
    /// `(power, M^{-1/2} Σ_{i+j=power} C[F_i,F_j])` over the snapshots
    pub collisions: Vec<(usize, Vec<DistField>)>,
    pub stats: BuildStats,
}

/// Builds the hierarchy on a lattice-closure Euler backbone.
pub struct HilbertBuilder<'a> {
    pub table: &'a KernelTable,
    pub grid: Arc<MomentumGrid>,
    pub space: SpatialGrid,
    pub config: HilbertConfig,
    pub cfl: f64,
    pub dissipation: f64,
    pub preconditioner: Option<Preconditioner>,
}

impl<'a> HilbertBuilder<'a> {
    pub fn new(
        table: &'a KernelTable,
        grid: Arc<MomentumGrid>,
        space: SpatialGrid,
        config: HilbertConfig,
    ) -> Self {
        Self {
            table,
            grid,
            space,
            config,
            cfl: 0.4,
            dissipation: 0.01,
            preconditioner: None,
        }
    }

    pub fn euler(&self) -> EulerSolver {
        let mut e = EulerSolver::new(self.space, Closure::Lattice(self.grid.clone()), self.cfl);
        e.dissipation = self.dissipation;
        e
    }

    pub fn build(&self, initial: Vec<CellState>) -> Result<Hierarchy, HilbertError> {
        self.config.validate()?;
        let grid = &*self.grid;
        let cfg = self.config;
        let euler = self.euler();
        let dt_e = cfg.euler_dt();
        let start = euler.from_primitive(initial, 0.0)?;
        let history = euler.run(&start, dt_e, cfg.t_final)?;
        let stride = 2 * cfg.substeps;
        let snaps = cfg.snapshots();

        let coeffs: Vec<Vec<(Matrix5<f64>, Matrix5<f64>)>> = history
            .states
            .iter()
            .map(|st| gram_pair(grid, &st.primitive))
            .collect::<Result<_, _>>()?;

        let mut frames = Vec::with_capacity(snaps);
        for s in 0..snaps {
            let st = &history.states[s * stride];
            let cells = LocalMaxwellian::batch(&st.primitive, grid, self.table)?;
            let wt = euler.time_derivative(&st.primitive)?;
            let dlog = cells.iter().map(|c| dlogm_coeffs(&c.juttner)).collect();
            let (gram_u, gram_f) = coeffs[s * stride].iter().cloned().unzip();
            frames.push(Frame {
                t: st.t,
                cells,
                wt,
                dlog,
                gram_u,
                gram_f,
            });
        }

        let pre = match &self.preconditioner {
            Some(p) => p.clone(),
            None => {
                let reference = mean_state(&history.states[0]);
                let cell = LocalMaxwellian::new(reference, grid, self.table)?;
                Preconditioner::Reference(Arc::new(reference_factor(
                    self.table, grid, &cell, None,
                )?))
            }
        };

        let mut h = Hierarchy {
            config: cfg,
            space: self.space,
            grid: self.grid.clone(),
            history,
            orders: vec![frames.iter().map(|f| build_f0(&f.cells, f.t)).collect()],
            sources: vec![vec![vec![[0.0; 5]; self.space.cells]; snaps]],
            frames,
            collisions: Vec::new(),
            stats: BuildStats::default(),
        };

        for m in 1..=2 * cfg.k - 1 {
            let micro: Vec<DistField> = (0..snaps)
                .map(|s| self.micro_part_next(&mut h, m - 1, s, &pre))
                .collect::<Result<_, _>>()?;
            let src: Vec<Vec<Cons>> = micro
                .iter()
                .zip(&h.frames)
                .map(|(mu, f)| micro_flux(grid, &f.cells, mu))
                .collect();
            let y = macro_solve_next(&h, &coeffs, &src, self.dissipation, m)?;
            let coeffs_m: Vec<ExpansionCoefficient> = (0..snaps)
                .map(|s| assemble_order(grid, &h.frames[s], m, &y[s], micro[s].clone()))
                .collect();
            h.orders.push(coeffs_m);
            h.sources.push(src);
        }

        let pieces = remainder_pieces(self.table, grid, &h);
        h.collisions = pieces;
        Ok(h)
    }

    /// `(I-P)[F_{n+1}/M^{1/2}] = L^{-1}[-M^{-1/2}(∂_tF_n + p̂1 ∂_xF_n - Σ C[F_i,F_j])]`
    /// at snapshot `s`.
    pub fn micro_part_next(
        &self,
        h: &mut Hierarchy,
        n: usize,
        s: usize,
        pre: &Preconditioner,
    ) -> Result<DistField, HilbertError> {
        let grid = &*self.grid;
        let frame = &h.frames[s];
        let dt_f = time_derivative_field(h, n, s);
        let dx_f = h.orders[n][s].field.dx(&h.space);
        let coll = collision_sum(self.table, grid, h, n + 1, s, 1);
        let nodes = grid.len();
        let rhs: Vec<Vec<f64>> = (0..h.space.cells)
            .map(|i| {
                let c = &frame.cells[i];
                (0..nodes)
                    .map(|k| {
                        let v = grid.p_hat(k)[0];
                        -(dt_f.cell(i)[k] + v * dx_f.cell(i)[k]) / c.sqrt_m[k]
                            + coll.cell(i)[k]
                    })
                    .collect()
            })
            .collect();
        let cells: Vec<&LocalMaxwellian> = frame.cells.iter().collect();
        let (x, stats) = crate::linearized::solve_batch(
            self.table,
            grid,
            &cells,
            &rhs,
            None,
            pre,
            &self.config.solve,
        )
        .map_err(|e| HilbertError::Solve {
            order: n + 1,
            source: e,
        })?;
        for st in stats {
            h.stats.solves += 1;
            h.stats.max_iterations = h.stats.max_iterations.max(st.iterations);
            h.stats.max_residual = h.stats.max_residual.max(st.residual);
        }
        Ok(DistField::from_cells(x))
    }
}

fn mean_state(st: &EulerState) -> CellState {
    let n = st.primitive.len() as f64;
    let mut w = [0.0; 5];
    for p in &st.primitive {
        let v = prim_of(p);
        for a in 0..5 {
            w[a] += v[a] / n;
        }
    }
    state_of(&w)
}

fn gram_pair(
    grid: &MomentumGrid,
    prim: &[CellState],
) -> Result<Vec<(Matrix5<f64>, Matrix5<f64>)>, HilbertError> {
    prim.par_iter()
        .map(|s| {
            let m = crate::equilibrium::Juttner::new(*s)
                .map_err(EulerError::from)?
                .on_grid(grid);
            let lm = lattice_moments(grid, &m);
            Ok((lm.gram, lm.gram_flux))
        })
        .collect()
}

/// `∫ χ p̂1 M^{1/2} μ` per cell.
pub fn micro_flux(grid: &MomentumGrid, cells: &[LocalMaxwellian], mu: &DistField) -> Vec<Cons> {
    cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let g: Vec<f64> = (0..grid.len())
                .map(|k| grid.p_hat(k)[0] * mu.cell(i)[k])
                .collect();
            c.moments(grid, &g)
        })
        .collect()
}

fn assemble_order(
    grid: &MomentumGrid,
    frame: &Frame,
    n: usize,
    y: &[Cons],
    micro: DistField,
) -> ExpansionCoefficient {
    let mut field = DistField::zeros(frame.cells.len(), grid.len());
    let mut macro_ = Vec::with_capacity(frame.cells.len());
    for (i, c) in frame.cells.iter().enumerate() {
        let mc = MacroCoeffs::from_array(y[i]);
        let p = c.reconstruct(grid, &mc);
        for (k, f) in field.cell_mut(i).iter_mut().enumerate() {
            *f = c.sqrt_m[k] * (p[k] + micro.cell(i)[k]);
        }
        macro_.push(mc);
    }
    ExpansionCoefficient {
        n,
        t: frame.t,
        field,
        macro_: ProjectionCoefficients { cells: macro_ },
        micro,
    }
}

/// `∂_t F_n` at snapshot `s`: chain rule through the backbone and the order-n
/// macro system; the micro part is differenced in time with its null-space
/// component fixed by orthogonality.
fn time_derivative_field(h: &Hierarchy, n: usize, s: usize) -> DistField {
    let grid = &*h.grid;
    let frame = &h.frames[s];
    let nodes = grid.len();
    let cells = h.space.cells;
    let mut out = DistField::zeros(cells, nodes);
    if n == 0 {
        for (i, c) in frame.cells.iter().enumerate() {
            let l = frame.dt_log_m(grid, i);
            for (k, o) in out.cell_mut(i).iter_mut().enumerate() {
                *o = c.m[k] * l[k];
            }
        }
        return out;
    }
    let coef = &h.orders[n][s];
    let ydot = macro_rate(h, n, s);
    let snaps = h.frames.len();
    let (start, w) = time_stencil(snaps, s, h.config.snapshot_dt);
    for (i, c) in frame.cells.iter().enumerate() {
        let l = frame.dt_log_m(grid, i);
        let y = coef.macro_.cells[i].to_array();
        let mu = coef.micro.cell(i);
        let mut dmu = vec![0.0; nodes];
        for (j, wj) in w.iter().enumerate() {
            let other = h.orders[n][start + j].micro.cell(i);
            for k in 0..nodes {
                dmu[k] += wj * other[k];
            }
        }
        let mut dmu = c.micro_part(grid, &dmu);
        let lm: Vec<f64> = (0..nodes).map(|k| 0.5 * l[k] * mu[k]).collect();
        let target = c.moments(grid, &lm);
        let fix = c.from_moments(grid, [-target[0], -target[1], -target[2], -target[3], -target[4]]);
        dmu.iter_mut().zip(&fix).for_each(|(a, b)| *a += b);
        for (k, o) in out.cell_mut(i).iter_mut().enumerate() {
            let cy = chi_dot(grid, k, &y);
            let cyd = chi_dot(grid, k, &ydot[i]);
            *o = c.m[k] * (l[k] * cy + cyd) + c.sqrt_m[k] * (0.5 * l[k] * mu[k] + dmu[k]);
        }
    }
    out
}

/// `ẏ_n = G_U^{-1}(-D_x(G_F y_n + s_n) - Ġ_U y_n)` at snapshot `s`.
fn macro_rate(h: &Hierarchy, n: usize, s: usize) -> Vec<Cons> {
    let grid = &*h.grid;
    let frame = &h.frames[s];
    let cells = h.space.cells;
    let y: Vec<Vector5<f64>> = h.orders[n][s]
        .macro_
        .cells
        .iter()
        .map(|c| Vector5::from(c.to_array()))
        .collect();
    let flux: Vec<Vector5<f64>> = (0..cells)
        .map(|i| frame.gram_f[i] * y[i] + Vector5::from(h.sources[n][s][i]))
        .collect();
    let mut div = vec![Vector5::zeros(); cells];
    for a in 0..5 {
        let col: Vec<f64> = flux.iter().map(|v| v[a]).collect();
        let d = h.space.d1(&col);
        for i in 0..cells {
            div[i][a] = d[i];
        }
    }
    (0..cells)
        .map(|i| {
            let c = &frame.cells[i];
            let l = frame.dt_log_m(grid, i);
            let mut gdot = Matrix5::zeros();
            for a in 0..5 {
                for b in a..5 {
                    let v: Vec<f64> = (0..grid.len())
                        .map(|k| {
                            let x = chi(grid, k);
                            x[a] * x[b] * c.m[k] * l[k]
                        })
                        .collect();
                    gdot[(a, b)] = grid.integrate(&v);
                    gdot[(b, a)] = gdot[(a, b)];
                }
            }
            let r = -div[i] - gdot * y[i];
            let x = frame.gram_u[i].lu().solve(&r).unwrap_or_else(Vector5::zeros);
            [x[0], x[1], x[2], x[3], x[4]]
        })
        .collect()
}

/// `M^{-1/2} Σ_{i+j=p, i,j≥lo} C[F_i, F_j]` at snapshot `s`, using orders
/// already built.
fn collision_sum(
    table: &KernelTable,
    grid: &MomentumGrid,
    h: &Hierarchy,
    p: usize,
    s: usize,
    lo: usize,
) -> DistField {
    let frame = &h.frames[s];
    let cells = h.space.cells;
    let built = h.orders.len();
    let pairs: Vec<(usize, usize)> = (lo..=p.saturating_sub(lo))
        .map(|i| (i, p - i))
        .filter(|&(i, j)| i < built && j < built && j >= lo)
        .collect();
    let mut out = DistField::zeros(cells, grid.len());
    if pairs.is_empty() {
        return out;
    }
    let scaled: Vec<DistField> = (0..built)
        .map(|n| {
            if pairs.iter().any(|&(i, j)| i == n || j == n) {
                h.orders[n][s].scaled(&frame.cells)
            } else {
                DistField::zeros(0, 0)
            }
        })
        .collect();
    let mut items = Vec::with_capacity(cells * pairs.len());
    for i in 0..cells {
        for &(a, b) in &pairs {
            items.push((&frame.cells[i], scaled[a].cell(i), scaled[b].cell(i)));
        }
    }
    let res = apply_gamma_batch(table, grid, &items);
    for (idx, r) in res.into_iter().enumerate() {
        let i = idx / pairs.len();
        out.cell_mut(i).iter_mut().zip(&r).for_each(|(o, x)| *o += x);
    }
    out
}

/// Integrates the order-`m` macro system from zero data and returns `y_m` at
/// the snapshots.
pub fn macro_solve_next(
    h: &Hierarchy,
    coeffs: &[Vec<(Matrix5<f64>, Matrix5<f64>)>],
    sources: &[Vec<Cons>],
    dissipation: f64,
    m: usize,
) -> Result<Vec<Vec<Cons>>, HilbertError> {
    let cfg = h.config;
    let dt = cfg.snapshot_dt / cfg.substeps as f64;
    let limit = 0.4 * h.space.h();
    if dt > limit * (1.0 + 1e-12) {
        return Err(EulerError::Cfl { dt, limit }.into());
    }
    let snaps = sources.len();
    let cells = h.space.cells;
    let source = |t: f64| -> Vec<Cons> {
        let (start, x) = stencil4(snaps, cfg.snapshot_dt, t);
        let w = lagrange_weights(4, x);
        (0..cells)
            .map(|i| {
                let mut v = [0.0; 5];
                for (j, wj) in w.iter().enumerate() {
                    for a in 0..5 {
                        v[a] += wj * sources[start + j][i][a];
                    }
                }
                v
            })
            .collect()
    };
    let u = integrate_macro(&h.space, dissipation, dt, coeffs, source, vec![[0.0; 5]; cells])
        .map_err(|_| HilbertError::NonFinite(m))?;
    Ok((0..snaps)
        .map(|s| {
            let us = &u[s * cfg.substeps];
            (0..cells)
                .map(|i| {
                    let y = h.frames[s].gram_u[i]
                        .lu()
                        .solve(&Vector5::from(us[i]))
                        .unwrap_or_else(Vector5::zeros);
                    [y[0], y[1], y[2], y[3], y[4]]
                })
                .collect()
        })
        .collect())
}

/// Index pairs entering `S`: `i + j ≥ 2k+1`, `2 ≤ i, j ≤ 2k-1`.
pub fn source_pairs(k: usize) -> Vec<(usize, usize)> {
    let top = 2 * k - 1;
    let mut v = Vec::new();
    for i in 2..=top {
        for j in 2..=top {
            if i + j > 2 * k {
                v.push((i, j));
            }
        }
    }
    v
}

fn remainder_pieces(table: &KernelTable, grid: &MomentumGrid, h: &Hierarchy) -> Vec<(usize, Vec<DistField>)> {
    let k = h.config.k;
    (2 * k + 1..=4 * k - 2)
        .map(|p| {
            let fields = (0..h.frames.len())
                .map(|s| collision_sum(table, grid, h, p, s, 2))
                .collect();
            (p, fields)
        })
        .collect()
}

impl Hierarchy {
    pub fn snapshots(&self) -> usize {
        self.frames.len()
    }

    /// `(S, S̄)` at snapshot `s`, with `S = Σ ε^{i+j-k} C[F_i,F_j]`.
    pub fn remainder_source_s(&self, epsilon: f64, s: usize) -> (DistField, DistField) {
        let grid = &*self.grid;
        let k = self.config.k as i32;
        let mut sbar = DistField::zeros(self.space.cells, grid.len());
        for (p, fields) in &self.collisions {
            sbar.axpy(epsilon.powi(*p as i32 - k), &fields[s]);
        }
        let mut full = sbar.clone();
        for (i, c) in self.frames[s].cells.iter().enumerate() {
            full.cell_mut(i)
                .iter_mut()
                .zip(&c.sqrt_m)
                .for_each(|(x, q)| *x *= q);
        }
        (full, sbar)
    }

    /// Residual of the order-`n` equation at every interior snapshot; the
    /// top order is checked on its null-space component only.
    pub fn residuals(&self, table: &KernelTable) -> Vec<OrderResidual> {
        let grid = &*self.grid;
        let top = self.orders.len() - 1;
        let snaps = self.snapshots();
        let nodes = grid.len();
        let cells = self.space.cells;
        let inner: Vec<usize> = (2..snaps - 2).collect();
        (0..=top)
            .map(|n| {
                let mut res2 = 0.0;
                let mut sc2 = 0.0;
                for &s in &inner {
                    let frame = &self.frames[s];
                    let (start, w) = time_stencil(snaps, s, self.config.snapshot_dt);
                    let mut dt_f = DistField::zeros(cells, nodes);
                    for (j, wj) in w.iter().enumerate() {
                        dt_f.axpy(*wj, &self.orders[n][start + j].field);
                    }
                    let dx_f = self.orders[n][s].field.dx(&self.space);
                    let (coll, lmu) = if n < top {
                        let c = collision_sum(table, grid, self, n + 1, s, 1);
                        let cs: Vec<&LocalMaxwellian> = frame.cells.iter().collect();
                        let mus: Vec<&[f64]> = (0..cells)
                            .map(|i| self.orders[n + 1][s].micro.cell(i))
                            .collect();
                        (Some(c), Some(apply_l_batch(table, grid, &cs, &mus)))
                    } else {
                        (None, None)
                    };
                    let mut tr = vec![0.0; cells];
                    let mut sc = vec![0.0; cells];
                    for (i, c) in frame.cells.iter().enumerate() {
                        let a: Vec<f64> = (0..nodes).map(|k| dt_f.cell(i)[k] / c.sqrt_m[k]).collect();
                        let b: Vec<f64> = (0..nodes)
                            .map(|k| grid.p_hat(k)[0] * dx_f.cell(i)[k] / c.sqrt_m[k])
                            .collect();
                        let mut r: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
                        match (&coll, &lmu) {
                            (Some(cl), Some(lm)) => {
                                for k in 0..nodes {
                                    r[k] += lm[i][k] - cl.cell(i)[k];
                                }
                            }
                            _ => r = c.p_part(grid, &r),
                        }
                        tr[i] = grid.inner(&r, &r);
                        sc[i] = (grid.norm(&a) + grid.norm(&b)).powi(2);
                    }
                    res2 += self.space.integrate(&tr);
                    sc2 += self.space.integrate(&sc);
                }
                let residual = res2.sqrt();
                let scale = sc2.sqrt();
                OrderResidual {
                    order: n,
                    residual,
                    scale,
                    relative: if scale > 0.0 { residual / scale } else { 0.0 },
                    projected: n == top,
                }
            })
            .collect()
    }

    /// `|F_n| ≤ C (1+t)^{n-1} M^β` node-wise; `C` fitted on the first half
    /// of the window and required to hold within a factor two on the rest.
    pub fn decay_check(&self, n: usize) -> DecayReport {
        let beta = self.config.decay_exponent;
        let grid = &*self.grid;
        let snaps = self.snapshots();
        let half = snaps / 2;
        let mut first = 0.0f64;
        let mut all = 0.0f64;
        let mut arg = (0, 0, 0);
        for s in 0..snaps {
            let frame = &self.frames[s];
            let growth = (1.0 + frame.t).powi(n.max(1) as i32 - 1);
            for (i, c) in frame.cells.iter().enumerate() {
                let f = self.orders[n][s].field.cell(i);
                for k in 0..grid.len() {
                    let r = f[k].abs() / (growth * c.m[k].powf(beta));
                    if s <= half {
                        first = first.max(r);
                    }
                    if r > all {
                        all = r;
                        arg = (s, i, k);
                    }
                }
            }
        }
        let idx = arg.2;
        let nn = grid.n;
        let ijk = [idx / (nn * nn), (idx / nn) % nn, idx % nn];
        DecayReport {
            order: n,
            exponent: beta,
            c_fit: first,
            c_max: all,
            argmax: arg,
            at_boundary: ijk.iter().any(|&q| q == 0 || q == nn - 1),
            passes: all.is_finite() && all <= 2.0 * first,
        }
    }

    /// Data needed by the remainder solver.
    pub fn backbone(&self) -> Backbone {
        let cfg = self.config;
        let prims: Vec<Vec<Prim>> = self
            .history
            .states
            .iter()
            .map(|st| st.primitive.iter().map(prim_of).collect())
            .collect();
        let fbar = (1..self.orders.len())
            .map(|n| {
                (0..self.snapshots())
                    .map(|s| self.orders[n][s].scaled(&self.frames[s].cells))
                    .collect()
            })
            .collect();
        let g0 = gradient_factor(&self.space, &prims[0]);
        Backbone {
            k: cfg.k,
            space: self.space,
            radius: self.grid.radius,
            points_per_axis: self.grid.n,
            snapshot_dt: cfg.snapshot_dt,
            euler_dt: self.history.dt,
            euler: prims,
            fbar,
            sbar: self.collisions.clone(),
            gradient: g0,
        }
    }
}

/// `Σ_{j=1..3} |∂_x^j W(x)|` per cell.
pub fn gradient_factor(space: &SpatialGrid, w: &[Prim]) -> Vec<f64> {
    let n = space.cells;
    let mut out = vec![0.0; n];
    let mut cur: Vec<Prim> = w.to_vec();
    for _ in 0..3 {
        let mut next = vec![[0.0; 5]; n];
        for a in 0..5 {
            let col: Vec<f64> = cur.iter().map(|v| v[a]).collect();
            let d = space.d1(&col);
            for i in 0..n {
                next[i][a] = d[i];
            }
        }
        for i in 0..n {
            out[i] += next[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        }
        cur = next;
    }
    out
}

/// Expansion data consumed by the remainder solver.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub k: usize,
    pub space: SpatialGrid,
    pub radius: f64,
    pub points_per_axis: usize,
    pub snapshot_dt: f64,
    pub euler_dt: f64,
    /// primitive Euler fields every `euler_dt`
    pub euler: Vec<Vec<Prim>>,
    /// `F_n / M^{1/2}` for `n = 1..2k-1` over the snapshots
    pub fbar: Vec<Vec<DistField>>,
    pub sbar: Vec<(usize, Vec<DistField>)>,
    /// `Σ_{j=1..3} |∂_x^j W(0, x)|`
    pub gradient: Vec<f64>,
}

const MAGIC: &[u8; 8] = b"LHBACKB1";

impl Backbone {
    /// Constant state with every correction zero.
    pub fn constant(space: SpatialGrid, grid: &MomentumGrid, state: CellState, k: usize, t_final: f64) -> Self {
        let snapshot_dt = 0.05;
        let snaps = (t_final / snapshot_dt).round() as usize + 1;
        let euler_dt = snapshot_dt / 4.0;
        let n_e = 4 * (snaps - 1) + 1;
        let zero = DistField::zeros(space.cells, grid.len());
        Self {
            k,
            space,
            radius: grid.radius,
            points_per_axis: grid.n,
            snapshot_dt,
            euler_dt,
            euler: vec![vec![prim_of(&state); space.cells]; n_e],
            fbar: vec![vec![zero.clone(); snaps]; 2 * k - 1],
            sbar: (2 * k + 1..=4 * k - 2).map(|p| (p, vec![zero.clone(); snaps])).collect(),
            gradient: vec![0.0; space.cells],
        }
    }

    pub fn t_final(&self) -> f64 {
        (self.euler.len() - 1) as f64 * self.euler_dt
    }

    pub fn matches(&self, grid: &MomentumGrid) -> bool {
        self.radius == grid.radius && self.points_per_axis == grid.n
    }

    pub fn prim_at(&self, t: f64) -> Vec<CellState> {
        let (start, x) = stencil4(self.euler.len(), self.euler_dt, t);
        let w = lagrange_weights(4, x);
        (0..self.space.cells)
            .map(|i| {
                let mut v = [0.0; 5];
                for (j, wj) in w.iter().enumerate() {
                    for a in 0..5 {
                        v[a] += wj * self.euler[start + j][i][a];
                    }
                }
                state_of(&v)
            })
            .collect()
    }

    /// `∂_t W` from the cubic interpolant of the stored fields.
    pub fn wt_at(&self, t: f64) -> Vec<Prim> {
        let (start, x) = stencil4(self.euler.len(), self.euler_dt, t);
        let w = lagrange_derivative_weights(4, x);
        (0..self.space.cells)
            .map(|i| {
                let mut v = [0.0; 5];
                for (j, wj) in w.iter().enumerate() {
                    for a in 0..5 {
                        v[a] += wj / self.euler_dt * self.euler[start + j][i][a];
                    }
                }
                v
            })
            .collect()
    }

    fn interp(&self, series: &[DistField], t: f64) -> DistField {
        let (start, x) = stencil4(series.len(), self.snapshot_dt, t);
        let w = lagrange_weights(4, x);
        let mut out = DistField::zeros(series[0].cells, series[0].nodes);
        for (j, wj) in w.iter().enumerate() {
            out.axpy(*wj, &series[start + j]);
        }
        out
    }

    /// `F_n / M^{1/2}` at time `t` (n ≥ 1).
    pub fn fbar_at(&self, n: usize, t: f64) -> DistField {
        self.interp(&self.fbar[n - 1], t)
    }

    /// `Σ_{n≥1} ε^{n-1} F_n / M^{1/2}`
    pub fn coupling_at(&self, epsilon: f64, t: f64) -> DistField {
        let mut out = self.fbar_at(1, t);
        for n in 2..=self.fbar.len() {
            out.axpy(epsilon.powi(n as i32 - 1), &self.fbar_at(n, t));
        }
        out
    }

    /// `Σ_{n≥1} ε^n F_n / M^{1/2}`
    pub fn correction_at(&self, epsilon: f64, t: f64) -> DistField {
        self.coupling_at(epsilon, t).scaled(epsilon)
    }

    /// `S̄ = M^{-1/2} S` at time `t`.
    pub fn sbar_at(&self, epsilon: f64, t: f64) -> DistField {
        let k = self.k as i32;
        let mut out = DistField::zeros(self.space.cells, self.fbar[0][0].nodes);
        for (p, series) in &self.sbar {
            out.axpy(epsilon.powi(*p as i32 - k), &self.interp(series, t));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), HilbertError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        let header = [
            self.k as u64,
            self.space.cells as u64,
            self.points_per_axis as u64,
            self.euler.len() as u64,
            self.fbar.first().map_or(0, |v| v.len()) as u64,
            self.sbar.len() as u64,
        ];
        for x in header {
            w.write_all(&x.to_le_bytes())?;
        }
        let put = |w: &mut dyn Write, v: &[f64]| -> std::io::Result<()> {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
            Ok(())
        };
        put(
            &mut w,
            &[self.space.length, self.radius, self.snapshot_dt, self.euler_dt],
        )?;
        for row in &self.euler {
            put(&mut w, &row.concat())?;
        }
        for series in &self.fbar {
            for f in series {
                put(&mut w, &f.data)?;
            }
        }
        for (p, series) in &self.sbar {
            w.write_all(&(*p as u64).to_le_bytes())?;
            for f in series {
                put(&mut w, &f.data)?;
            }
        }
        put(&mut w, &self.gradient)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HilbertError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { b: &bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(HilbertError::Format("bad magic".into()));
        }
        let k = cur.u64()? as usize;
        let cells = cur.u64()? as usize;
        let ppa = cur.u64()? as usize;
        let n_e = cur.u64()? as usize;
        let snaps = cur.u64()? as usize;
        let n_s = cur.u64()? as usize;
        if k < 2 || cells < 4 || ppa < 2 || n_e < 4 || snaps < 4 {
            return Err(HilbertError::Format("inconsistent header".into()));
        }
        let length = cur.f64()?;
        let radius = cur.f64()?;
        let snapshot_dt = cur.f64()?;
        let euler_dt = cur.f64()?;
        let space = SpatialGrid::new(cells, length)
            .map_err(|e| HilbertError::Format(e.to_string()))?;
        let nodes = ppa * ppa * ppa;
        let mut euler = Vec::with_capacity(n_e);
        for _ in 0..n_e {
            let v = cur.f64s(5 * cells)?;
            euler.push(v.chunks(5).map(|c| [c[0], c[1], c[2], c[3], c[4]]).collect());
        }
        let field = |cur: &mut Cursor| -> Result<DistField, HilbertError> {
            Ok(DistField {
                cells,
                nodes,
                data: cur.f64s(cells * nodes)?,
            })
        };
        let mut fbar = Vec::new();
        for _ in 0..2 * k - 1 {
            fbar.push((0..snaps).map(|_| field(&mut cur)).collect::<Result<Vec<_>, _>>()?);
        }
        let mut sbar = Vec::new();
        for _ in 0..n_s {
            let p = cur.u64()? as usize;
            sbar.push((p, (0..snaps).map(|_| field(&mut cur)).collect::<Result<Vec<_>, _>>()?));
        }
        let gradient = cur.f64s(cells)?;
        if cur.pos != bytes.len() {
            return Err(HilbertError::Format("trailing bytes".into()));
        }
        Ok(Self {
            k,
            space,
            radius,
            points_per_axis: ppa,
            snapshot_dt,
            euler_dt,
            euler,
            fbar,
            sbar,
            gradient,
        })
    }
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], HilbertError> {
        if self.pos + n > self.b.len() {
            return Err(HilbertError::Format("truncated file".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, HilbertError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, HilbertError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, HilbertError> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
