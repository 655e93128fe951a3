//! Time integration of the remainder `f` in
//! `F = Σ ε^n F_n + ε^k M^{1/2} f`, with energy functionals, macroscopic
//! diagnostics, positivity checks and the Knudsen sweep.
//!
//! One step: transport `-p̂1 ∂_x f` by SSP-RK3 (third- or first-order
//! upwind), then the explicit sources, then the implicit `(I + dt/ε L)^{-1}`
//! with `L` taken at the new time. `imex_order = 2` uses Strang splitting of
//! the transport around an ARS(2,2,2) stiff/explicit stage pair.

use crate::collision::KernelTable;
use crate::equilibrium::CellState;
use crate::euler_fluid::{chi, dlogm_coeffs, prim_of, state_of, Prim};
use crate::hilbert_expansion::{chi_dot, gradient_factor, Backbone};
use crate::linearized::{
    apply_gamma_batch, apply_l_batch, dense_l, reference_factor_from_dense, rate_y, sigma_norm,
    weight_value, LinearizedError, LocalMaxwellian, MacroCoeffs, Preconditioner,
    ProjectionCoefficients, ReferenceFactor, SolveOptions, WeightSpec,
};
use crate::phase_space::{DistField, MomentumGrid, SpatialGrid};
use nalgebra::{DMatrix, DVector, Matrix5, Vector5};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RemainderError {
    #[error(transparent)]
    Linearized(#[from] LinearizedError),
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("remainder became non-finite at t = {0}")]
    NonFinite(f64),
    #[error("implicit solve failed at t = {t}: {source}")]
    Implicit { t: f64, source: LinearizedError },
    #[error("sweep aborted at epsilon = {epsilon}: {source}")]
    Sweep {
        epsilon: f64,
        partial: Box<SweepResult>,
        source: Box<RemainderError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportScheme {
    Upwind3,
    Upwind1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub dt: f64,
    pub t_final: f64,
    pub imex_order: u8,
    pub dt_cap: f64,
    pub transport: TransportScheme,
    /// drop `L`, `Γ`, `S̄` and the Maxwellian term (test mode)
    pub collisionless: bool,
    /// exponent in `F_R(0) = M^τ G(x)`
    pub tau: f64,
    pub weight_n0: u32,
    pub weight_temperature: f64,
    #[serde(skip)]
    pub solve: SolveOptions,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dt: 0.025,
            t_final: 0.5,
            imex_order: 1,
            dt_cap: 0.1,
            transport: TransportScheme::Upwind3,
            collisionless: false,
            tau: 0.5,
            weight_n0: 3,
            weight_temperature: 0.25,
            solve: SolveOptions::default(),
        }
    }
}

impl SolverConfig {
    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    pub fn validate(&self, space: &SpatialGrid) -> Result<(), RemainderError> {
        let bad = |m: String| Err(RemainderError::Config(m));
        if !(self.dt > 0.0) || !(self.t_final > 0.0) {
            return bad("dt and t_final must be positive".into());
        }
        let cfl = 0.4 * space.h();
        if self.dt > cfl.min(self.dt_cap) * (1.0 + 1e-12) {
            return bad(format!(
                "dt = {} exceeds min(0.4 h, dt_cap) = {}",
                self.dt,
                cfl.min(self.dt_cap)
            ));
        }
        if (self.steps() as f64 * self.dt - self.t_final).abs() > 1e-9 * self.t_final {
            return bad("t_final must be a multiple of dt".into());
        }
        if !matches!(self.imex_order, 1 | 2) {
            return bad(format!("imex_order must be 1 or 2, got {}", self.imex_order));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if self.weight_n0 < 3 {
            return bad("weight N0 must be at least 3".into());
        }
        Ok(())
    }

    fn weights(&self, ell: u32) -> WeightSpec {
        WeightSpec {
            n0: self.weight_n0,
            temperature: self.weight_temperature,
            ell,
        }
    }
}

/// Backbone quantities frozen at one time.
#[derive(Debug, Clone)]
pub struct BackboneAt {
    pub t: f64,
    pub cells: Vec<LocalMaxwellian>,
    /// `½(∂_t + p̂1 ∂_x) log M` per cell and node
    pub half_dlog: DistField,
    /// `Σ ε^{n-1} F_n / M^{1/2}`
    pub coupling: DistField,
    pub sbar: DistField,
}

/// State of the remainder at one time.
#[derive(Debug, Clone)]
pub struct RemainderField {
    pub f: DistField,
    pub epsilon: f64,
    pub k: usize,
    pub t: f64,
    pub backbone: Arc<Backbone>,
}

impl RemainderField {
    pub fn new(f: DistField, epsilon: f64, t: f64, backbone: Arc<Backbone>) -> Result<Self, RemainderError> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(RemainderError::Config(format!("epsilon {epsilon} outside (0, 1]")));
        }
        Ok(Self {
            f,
            epsilon,
            k: backbone.k,
            t,
            backbone,
        })
    }

    pub fn zeros(ctx: &SolverContext, epsilon: f64) -> Result<Self, RemainderError> {
        let f = DistField::zeros(ctx.space().cells, ctx.grid.len());
        Self::new(f, epsilon, 0.0, ctx.backbone.clone())
    }

    /// `F = M + M^{1/2}(Σ ε^n F_n/M^{1/2} + ε^k f)`
    pub fn reconstruct(&self, ctx: &SolverContext, at: &BackboneAt) -> DistField {
        let mut out = self.deviation(ctx, at);
        for (i, c) in at.cells.iter().enumerate() {
            for (o, m) in out.cell_mut(i).iter_mut().zip(&c.m) {
                *o += m;
            }
        }
        out
    }

    /// `F - M`
    pub fn deviation(&self, ctx: &SolverContext, at: &BackboneAt) -> DistField {
        let eps = self.epsilon;
        let mut g = ctx.backbone.correction_at(eps, at.t);
        g.axpy(eps.powi(self.k as i32), &self.f);
        for (i, c) in at.cells.iter().enumerate() {
            for (o, s) in g.cell_mut(i).iter_mut().zip(&c.sqrt_m) {
                *o *= s;
            }
        }
        g
    }

    pub fn is_finite(&self) -> bool {
        self.f.is_finite()
    }
}

/// Shared, immutable data of a remainder run plus a cache of implicit
/// preconditioners keyed by the shift.
pub struct SolverContext<'a> {
    pub table: &'a KernelTable,
    pub grid: Arc<MomentumGrid>,
    pub backbone: Arc<Backbone>,
    pub config: SolverConfig,
    reference: DMatrix<f64>,
    reference_cell: LocalMaxwellian,
    factors: Mutex<Vec<(u64, Arc<ReferenceFactor>)>>,
}

impl<'a> SolverContext<'a> {
    pub fn new(
        table: &'a KernelTable,
        grid: Arc<MomentumGrid>,
        backbone: Arc<Backbone>,
        config: SolverConfig,
    ) -> Result<Self, RemainderError> {
        if !backbone.matches(&grid) {
            return Err(RemainderError::Config(
                "backbone was built on a different momentum grid".into(),
            ));
        }
        config.validate(&backbone.space)?;
        if config.t_final > backbone.t_final() * (1.0 + 1e-12) {
            return Err(RemainderError::Config(format!(
                "t_final {} is beyond the backbone window {}",
                config.t_final,
                backbone.t_final()
            )));
        }
        let states = backbone.prim_at(0.0);
        let max_t0 = states.iter().map(|s| s.t0).fold(0.0, f64::max);
        if !config.weights(0).validate(max_t0) {
            return Err(RemainderError::Config(format!(
                "weight temperature {} below sup T0 = {max_t0}",
                config.weight_temperature
            )));
        }
        let n = states.len() as f64;
        let mut w = [0.0; 5];
        for s in &states {
            let v = prim_of(s);
            for a in 0..5 {
                w[a] += v[a] / n;
            }
        }
        let reference_cell = LocalMaxwellian::new(state_of(&w), &grid, table)?;
        let reference = if config.collisionless {
            DMatrix::zeros(0, 0)
        } else {
            dense_l(table, &grid, &reference_cell)
        };
        Ok(Self {
            table,
            grid,
            backbone,
            config,
            reference,
            reference_cell,
            factors: Mutex::new(Vec::new()),
        })
    }

    pub fn space(&self) -> SpatialGrid {
        self.backbone.space
    }

    fn factor(&self, shift: f64) -> Result<Arc<ReferenceFactor>, RemainderError> {
        let key = shift.to_bits();
        let mut cache = self.factors.lock().expect("factor cache poisoned");
        if let Some((_, f)) = cache.iter().find(|(k, _)| *k == key) {
            return Ok(f.clone());
        }
        let f = Arc::new(reference_factor_from_dense(
            self.reference.clone(),
            &self.grid,
            &self.reference_cell,
            Some(shift),
        )?);
        cache.push((key, f.clone()));
        Ok(f)
    }

    pub fn at(&self, epsilon: f64, t: f64) -> Result<BackboneAt, RemainderError> {
        let grid = &*self.grid;
        let space = self.space();
        let states = self.backbone.prim_at(t);
        let cells = LocalMaxwellian::batch(&states, grid, self.table)?;
        let wt = self.backbone.wt_at(t);
        let prims: Vec<Prim> = states.iter().map(prim_of).collect();
        let mut wx = vec![[0.0; 5]; space.cells];
        for a in 0..5 {
            let col: Vec<f64> = prims.iter().map(|v| v[a]).collect();
            for (i, d) in space.d1(&col).into_iter().enumerate() {
                wx[i][a] = d;
            }
        }
        let rows: Vec<Vec<f64>> = cells
            .par_iter()
            .enumerate()
            .map(|(i, c)| {
                let cm = dlogm_coeffs(&c.juttner);
                let vt = cm * Vector5::from(wt[i]);
                let vx = cm * Vector5::from(wx[i]);
                (0..grid.len())
                    .map(|k| {
                        0.5 * (chi_dot(grid, k, vt.as_slice())
                            + grid.p_hat(k)[0] * chi_dot(grid, k, vx.as_slice()))
                    })
                    .collect()
            })
            .collect();
        Ok(BackboneAt {
            t,
            cells,
            half_dlog: DistField::from_cells(rows),
            coupling: self.backbone.coupling_at(epsilon, t),
            sbar: self.backbone.sbar_at(epsilon, t),
        })
    }

    /// Initial remainder `f(0) = M^{τ-1/2} G(x)`, so `F_R(0) = M^τ G`.
    pub fn initial_field(&self, epsilon: f64) -> Result<RemainderField, RemainderError> {
        let grid = &*self.grid;
        let space = self.space();
        let at = self.at(epsilon, 0.0)?;
        let g = initial_gradient_factor(self, &at);
        let tau = self.config.tau;
        let rows: Vec<Vec<f64>> = at
            .cells
            .iter()
            .zip(&g)
            .map(|(c, gi)| {
                (0..grid.len())
                    .map(|k| gi * ((tau - 0.5) * c.juttner.log_value(grid.nodes[k])).exp())
                    .collect()
            })
            .collect();
        debug_assert_eq!(rows.len(), space.cells);
        RemainderField::new(DistField::from_cells(rows), epsilon, 0.0, self.backbone.clone())
    }
}

/// `Σ_{j=1}^{2k-1} |∂^j W| + Σ_i Σ_{j=0}^{2k-1-i} |∂^j (a_i, b_i, c_i)|` at `t = 0`.
pub fn initial_gradient_factor(ctx: &SolverContext, at: &BackboneAt) -> Vec<f64> {
    let bb = &*ctx.backbone;
    let space = bb.space;
    let grid = &*ctx.grid;
    let w0: Vec<Prim> = bb.euler[0].clone();
    let mut g = gradient_factor(&space, &w0);
    let top = 2 * bb.k - 1;
    for i in 1..=top {
        let f = bb.fbar_at(i, 0.0);
        let mut cur: Vec<[f64; 5]> = at
            .cells
            .iter()
            .enumerate()
            .map(|(x, c)| c.project(grid, f.cell(x)).to_array())
            .collect();
        for j in 0..=top - i {
            if j > 0 {
                let mut next = vec![[0.0; 5]; space.cells];
                for a in 0..5 {
                    let col: Vec<f64> = cur.iter().map(|v| v[a]).collect();
                    for (x, d) in space.d1(&col).into_iter().enumerate() {
                        next[x][a] = d;
                    }
                }
                cur = next;
            }
            for (gx, v) in g.iter_mut().zip(&cur) {
                *gx += v.iter().map(|y| y * y).sum::<f64>().sqrt();
            }
        }
    }
    g
}

/// `-p̂1 ∂_x f` with the chosen upwind stencil, node by node.
pub fn transport_rhs(space: &SpatialGrid, velocity: &[f64], f: &DistField, scheme: TransportScheme) -> DistField {
    let n = space.cells;
    let nodes = f.nodes;
    let h = space.h();
    let mut out = DistField::zeros(n, nodes);
    out.data
        .par_chunks_mut(nodes)
        .enumerate()
        .for_each(|(i, row)| {
            let c = |d: isize| f.cell(space.wrap(i as isize + d));
            let (m2, m1, c0, p1, p2) = (c(-2), c(-1), c(0), c(1), c(2));
            for k in 0..nodes {
                let v = velocity[k];
                let d = match (scheme, v >= 0.0) {
                    (TransportScheme::Upwind1, true) => (c0[k] - m1[k]) / h,
                    (TransportScheme::Upwind1, false) => (p1[k] - c0[k]) / h,
                    (TransportScheme::Upwind3, true) => {
                        (2.0 * p1[k] + 3.0 * c0[k] - 6.0 * m1[k] + m2[k]) / (6.0 * h)
                    }
                    (TransportScheme::Upwind3, false) => {
                        -(2.0 * m1[k] + 3.0 * c0[k] - 6.0 * p1[k] + p2[k]) / (6.0 * h)
                    }
                };
                row[k] = -v * d;
            }
        });
    out
}

/// SSP-RK3 transport over `dt`.
pub fn transport_step(space: &SpatialGrid, velocity: &[f64], f: &DistField, dt: f64, scheme: TransportScheme) -> DistField {
    let mut f1 = f.clone();
    f1.axpy(dt, &transport_rhs(space, velocity, f, scheme));
    let mut f2 = f1.clone();
    f2.axpy(dt, &transport_rhs(space, velocity, &f1, scheme));
    let mut f2 = f2.scaled(0.25);
    f2.axpy(0.75, f);
    let mut f3 = f2.clone();
    f3.axpy(dt, &transport_rhs(space, velocity, &f2, scheme));
    let mut out = f3.scaled(2.0 / 3.0);
    out.axpy(1.0 / 3.0, f);
    out
}

fn velocity(grid: &MomentumGrid) -> Vec<f64> {
    (0..grid.len()).map(|k| grid.p_hat(k)[0]).collect()
}

/// `h̄ = Γ[G + ε^{k-1} f, f] + Γ[f, G] - ½(∂_t + p̂∂_x)log M f + S̄`
pub fn source_terms(ctx: &SolverContext, field: &DistField, eps: f64, at: &BackboneAt) -> DistField {
    let grid = &*ctx.grid;
    let cells = field.cells;
    if ctx.config.collisionless {
        return DistField::zeros(cells, field.nodes);
    }
    let k = ctx.backbone.k as i32;
    let mut left = at.coupling.clone();
    left.axpy(eps.powi(k - 1), field);
    let mut items = Vec::with_capacity(2 * cells);
    for i in 0..cells {
        items.push((&at.cells[i], left.cell(i), field.cell(i)));
        items.push((&at.cells[i], field.cell(i), at.coupling.cell(i)));
    }
    let gam = apply_gamma_batch(ctx.table, grid, &items);
    let mut out = at.sbar.clone();
    for i in 0..cells {
        let row = out.cell_mut(i);
        let (a, b) = (&gam[2 * i], &gam[2 * i + 1]);
        let hd = at.half_dlog.cell(i);
        let f = field.cell(i);
        for q in 0..row.len() {
            row[q] += a[q] + b[q] - hd[q] * f[q];
        }
    }
    out
}

/// `(I + s L)^{-1} r` cell by cell with `L` from `at`.
fn implicit_solve(ctx: &SolverContext, r: &DistField, shift: f64, at: &BackboneAt) -> Result<DistField, RemainderError> {
    if ctx.config.collisionless {
        return Ok(r.clone());
    }
    let pre = Preconditioner::Reference(ctx.factor(shift)?);
    let cells: Vec<&LocalMaxwellian> = at.cells.iter().collect();
    let rhs: Vec<Vec<f64>> = r.rows().into_iter().map(|v| v.to_vec()).collect();
    let (x, _) = crate::linearized::solve_batch(
        ctx.table,
        &ctx.grid,
        &cells,
        &rhs,
        Some(shift),
        &pre,
        &ctx.config.solve,
    )
    .map_err(|source| RemainderError::Implicit { t: at.t, source })?;
    Ok(DistField::from_cells(x))
}

/// Result of one step together with the source evaluated at the old time.
pub struct StepOutput {
    pub field: RemainderField,
    pub source: DistField,
    pub next: BackboneAt,
}

/// One IMEX step. `now` must be the backbone at `field.t`.
pub fn imex_step(ctx: &SolverContext, field: &RemainderField, now: &BackboneAt, dt: f64) -> Result<StepOutput, RemainderError> {
    let eps = field.epsilon;
    let space = ctx.space();
    let vel = velocity(&ctx.grid);
    let scheme = ctx.config.transport;
    let t1 = field.t + dt;
    let next = ctx.at(eps, t1)?;
    let (f_new, source) = match ctx.config.imex_order {
        1 => {
            let src = source_terms(ctx, &field.f, eps, now);
            let mut g = transport_step(&space, &vel, &field.f, dt, scheme);
            g.axpy(dt, &src);
            (implicit_solve(ctx, &g, dt / eps, &next)?, src)
        }
        _ => {
            let gamma = 1.0 - std::f64::consts::FRAC_1_SQRT_2;
            let delta = 1.0 - 1.0 / (2.0 * gamma);
            let half = transport_step(&space, &vel, &field.f, 0.5 * dt, scheme);
            let r0 = source_terms(ctx, &half, eps, now);
            let mid = ctx.at(eps, field.t + gamma * dt)?;
            let mut b1 = half.clone();
            b1.axpy(gamma * dt, &r0);
            let u1 = implicit_solve(ctx, &b1, gamma * dt / eps, &mid)?;
            // -L u1 / ε recovered from the first stage
            let mut lu1 = b1;
            lu1.axpy(-1.0, &u1);
            let lu1 = lu1.scaled(1.0 / (gamma * dt));
            let r1 = source_terms(ctx, &u1, eps, &mid);
            let mut b2 = half;
            b2.axpy(delta * dt, &r0);
            b2.axpy((1.0 - delta) * dt, &r1);
            b2.axpy(-(1.0 - gamma) * dt, &lu1);
            let u2 = implicit_solve(ctx, &b2, gamma * dt / eps, &next)?;
            let src = source_terms(ctx, &field.f, eps, now);
            (transport_step(&space, &vel, &u2, 0.5 * dt, scheme), src)
        }
    };
    if !f_new.is_finite() {
        return Err(RemainderError::NonFinite(t1));
    }
    Ok(StepOutput {
        field: RemainderField {
            f: f_new,
            t: t1,
            ..field.clone()
        },
        source,
        next,
    })
}

/// One displayed term of `E` or `D`: `value = prefactor · raw`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyTerm {
    pub label: &'static str,
    pub prefactor: f64,
    pub raw: f64,
}

impl EnergyTerm {
    pub fn value(&self) -> f64 {
        self.prefactor * self.raw
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyReport {
    pub e: f64,
    pub d: f64,
    pub e_terms: Vec<EnergyTerm>,
    pub d_terms: Vec<EnergyTerm>,
}

impl EnergyReport {
    pub fn raw(&self, label: &str) -> f64 {
        self.e_terms
            .iter()
            .chain(&self.d_terms)
            .find(|t| t.label == label)
            .map_or(f64::NAN, |t| t.raw)
    }

    pub fn all_nonnegative(&self) -> bool {
        self.e_terms.iter().chain(&self.d_terms).all(|t| t.raw >= 0.0) && self.e >= 0.0 && self.d >= 0.0
    }
}

fn split_macro(grid: &MomentumGrid, cells: &[LocalMaxwellian], f: &DistField) -> (DistField, DistField) {
    let p: Vec<Vec<f64>> = cells
        .par_iter()
        .enumerate()
        .map(|(i, c)| c.p_part(grid, f.cell(i)))
        .collect();
    let p = DistField::from_cells(p);
    let mut q = f.clone();
    q.axpy(-1.0, &p);
    (p, q)
}

struct NormKit<'b> {
    grid: &'b MomentumGrid,
    space: SpatialGrid,
    cells: &'b [LocalMaxwellian],
}

impl NormKit<'_> {
    /// `∬ (m g)²`
    fn l2(&self, g: &DistField, m: Option<&[f64]>) -> f64 {
        let per: Vec<f64> = (0..g.cells)
            .map(|i| {
                let c = g.cell(i);
                let v: Vec<f64> = match m {
                    Some(m) => c.iter().zip(m).map(|(x, w)| (x * w).powi(2)).collect(),
                    None => c.iter().map(|x| x * x).collect(),
                };
                self.grid.integrate(&v)
            })
            .collect();
        self.space.integrate(&per)
    }

    /// `∫ |m g|²_σ dx`
    fn sigma(&self, g: &DistField, m: Option<&[f64]>) -> f64 {
        let per: Vec<f64> = (0..g.cells)
            .into_par_iter()
            .map(|i| {
                let c = g.cell(i);
                let v: Vec<f64> = match m {
                    Some(m) => c.iter().zip(m).map(|(x, w)| x * w).collect(),
                    None => c.to_vec(),
                };
                sigma_norm(self.grid, &self.cells[i], &v).powi(2)
            })
            .collect();
        self.space.integrate(&per)
    }
}

/// Every term of `E` and `D` at the field's time.
pub fn energy_functional(ctx: &SolverContext, field: &RemainderField, at: &BackboneAt) -> EnergyReport {
    let grid = &*ctx.grid;
    let space = ctx.space();
    let eps = field.epsilon;
    let t = field.t;
    let f = &field.f;
    let kit = NormKit {
        grid,
        space,
        cells: &at.cells,
    };
    let w: Vec<Vec<f64>> = (0..3)
        .map(|l| {
            let spec = ctx.config.weights(l);
            (0..grid.len()).map(|k| weight_value(&spec, t, grid.nodes[k])).collect()
        })
        .collect();
    let ws: Vec<Vec<f64>> = w
        .iter()
        .map(|wl| wl.iter().zip(&grid.p0).map(|(a, p)| a * p.sqrt()).collect())
        .collect();
    let y = rate_y(ctx.config.weight_temperature, t);

    let (pf, qf) = split_macro(grid, &at.cells, f);
    let fx = f.dx(&space);
    let fxx = f.dxx(&space);
    let (pfx, qfx) = (pf.dx(&space), qf.dx(&space));
    let (pfxx, qfxx) = (pf.dxx(&space), qf.dxx(&space));

    let term = |label, prefactor, raw| EnergyTerm { label, prefactor, raw };
    let e_terms = vec![
        term("f", 1.0, kit.l2(f, None)),
        term("w0_micro", 1.0, kit.l2(&qf, Some(&w[0]))),
        term("dx_f", eps, kit.l2(&fx, None)),
        term("w1_dx_micro", eps, kit.l2(&qfx, Some(&w[1]))),
        term("dxx_f", eps * eps, kit.l2(&fxx, None)),
        term("w2_dxx_f", eps.powi(3), kit.l2(&fxx, Some(&w[2]))),
    ];
    let d_terms = vec![
        term("sigma_micro", 1.0 / eps, kit.sigma(&qf, None)),
        term("sigma_w0_micro", 1.0 / eps, kit.sigma(&qf, Some(&w[0]))),
        term("y_w0_sqrtp0_micro", y, kit.l2(&qf, Some(&ws[0]))),
        term("dx_macro", eps, kit.l2(&pfx, None)),
        term("sigma_dx_micro", 1.0, kit.sigma(&qfx, None)),
        term("sigma_w1_dx_micro", 1.0, kit.sigma(&qfx, Some(&w[1]))),
        term("y_w1_sqrtp0_dx_micro", eps * y, kit.l2(&qfx, Some(&ws[1]))),
        term("dxx_macro", eps * eps, kit.l2(&pfxx, None)),
        term("sigma_dxx_micro", eps, kit.sigma(&qfxx, None)),
        term("sigma_w2_dxx_micro", eps * eps, kit.sigma(&qfxx, Some(&w[2]))),
        term("y_w2_sqrtp0_dxx_f", eps.powi(3) * y, kit.l2(&fxx, Some(&ws[2]))),
    ];
    EnergyReport {
        e: e_terms.iter().map(EnergyTerm::value).sum(),
        d: d_terms.iter().map(EnergyTerm::value).sum(),
        e_terms,
        d_terms,
    }
}

/// `Σ_{j=0}^{2} ‖∂_x^j (F - M)‖` over `(x, p)`.
pub fn h2_distance_to_maxwellian(ctx: &SolverContext, field: &RemainderField, at: &BackboneAt) -> f64 {
    let space = ctx.space();
    let d = field.deviation(ctx, at);
    let dx = d.dx(&space);
    let dxx = d.dxx(&space);
    [d, dx, dxx]
        .iter()
        .map(|g| g.l2_sq(&space, &ctx.grid).sqrt())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Positivity {
    pub min: f64,
    /// `(cell, node)` of the minimum
    pub argmin: (usize, usize),
    pub peak_m: f64,
}

impl Positivity {
    pub fn relative(&self) -> f64 {
        self.min / self.peak_m
    }
}

pub fn positivity_check(ctx: &SolverContext, field: &RemainderField, at: &BackboneAt) -> Positivity {
    let full = field.reconstruct(ctx, at);
    let mut best = (f64::INFINITY, (0, 0));
    for i in 0..full.cells {
        for (k, v) in full.cell(i).iter().enumerate() {
            if *v < best.0 {
                best = (*v, (i, k));
            }
        }
    }
    let peak_m = at
        .cells
        .iter()
        .flat_map(|c| c.m.iter().cloned())
        .fold(0.0, f64::max);
    Positivity {
        min: best.0,
        argmin: best.1,
        peak_m,
    }
}

/// `∬ χ F dp dx` for the five invariants.
pub fn totals(ctx: &SolverContext, field: &RemainderField, at: &BackboneAt) -> [f64; 5] {
    let grid = &*ctx.grid;
    let space = ctx.space();
    let full = field.reconstruct(ctx, at);
    let mut out = [0.0; 5];
    for (a, o) in out.iter_mut().enumerate() {
        let per: Vec<f64> = (0..full.cells)
            .map(|i| {
                let v: Vec<f64> = full
                    .cell(i)
                    .iter()
                    .enumerate()
                    .map(|(k, x)| chi(grid, k)[a] * x)
                    .collect();
                grid.integrate(&v)
            })
            .collect();
        *o = space.integrate(&per);
    }
    out
}

/// Number of functions in the comparison basis
/// `{1, p_i, p0, p_i/p0, p_i²/p0, p_ip_j/p0 (i<j)} M^{1/2}`.
pub const MACRO_BASIS: usize = 14;

fn basis_value(grid: &MomentumGrid, k: usize) -> [f64; MACRO_BASIS] {
    let p = grid.nodes[k];
    let p0 = grid.p0[k];
    [
        1.0,
        p[0],
        p[1],
        p[2],
        p0,
        p[0] / p0,
        p[1] / p0,
        p[2] / p0,
        p[0] * p[0] / p0,
        p[1] * p[1] / p0,
        p[2] * p[2] / p0,
        p[0] * p[1] / p0,
        p[0] * p[2] / p0,
        p[1] * p[2] / p0,
    ]
}

/// Coefficients of the `L²` projection of `g` onto the 14-function basis.
pub fn project_macro_basis(grid: &MomentumGrid, cell: &LocalMaxwellian, g: &[f64]) -> [f64; MACRO_BASIS] {
    let mut gram = DMatrix::<f64>::zeros(MACRO_BASIS, MACRO_BASIS);
    let mut rhs = DVector::<f64>::zeros(MACRO_BASIS);
    let w = grid.weight_of(0);
    for k in 0..grid.len() {
        let b = basis_value(grid, k);
        let s = cell.sqrt_m[k];
        for i in 0..MACRO_BASIS {
            rhs[i] += w * b[i] * s * g[k];
            for j in 0..MACRO_BASIS {
                gram[(i, j)] += w * b[i] * b[j] * s * s;
            }
        }
    }
    let x = gram
        .cholesky()
        .map(|c| c.solve(&rhs))
        .unwrap_or_else(|| DVector::zeros(MACRO_BASIS));
    std::array::from_fn(|i| x[i])
}

/// How `h̄` is obtained in [`macro_diagnostics`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceMode {
    /// the model right-hand side
    Model,
    /// `h̄ := ∂_t f + p̂∂_x f + L f / ε`, so `f` solves its own forced problem
    Forcing,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MacroResidual {
    pub t: f64,
    /// per component of `(1, p, p0)`: residual of the local conservation
    /// law relative to the size of all its terms
    pub conservation: [f64; 5],
    /// groups `a, b_i, c, ∂_i a, ∂_i b_i, ∂_i b_j + ∂_j b_i`: mismatch of the
    /// 14-basis comparison relative to the size of both sides
    pub comparison: [f64; 6],
    #[serde(skip)]
    pub coefficients: ProjectionCoefficients,
}

/// Macroscopic coefficients at the middle state of `window` and the
/// residuals of the local conservation laws and the coefficient comparison,
/// with time derivatives from central differences.
pub fn macro_diagnostics(
    ctx: &SolverContext,
    window: [&RemainderField; 3],
    ats: [&BackboneAt; 3],
    source: Option<&DistField>,
    mode: SourceMode,
) -> MacroResidual {
    let grid = &*ctx.grid;
    let space = ctx.space();
    let [prev, cur, next] = window;
    let eps = cur.epsilon;
    let dt2 = next.t - prev.t;
    let at = ats[1];
    let n = space.cells;
    let nodes = grid.len();
    let vel = velocity(grid);

    let coeff = |fl: &RemainderField, a: &BackboneAt| -> Vec<[f64; 5]> {
        a.cells
            .iter()
            .enumerate()
            .map(|(i, c)| c.project(grid, fl.f.cell(i)).to_array())
            .collect()
    };
    let c_prev = coeff(prev, ats[0]);
    let c_cur = coeff(cur, at);
    let c_next = coeff(next, ats[2]);

    let mut ft = next.f.clone();
    ft.axpy(-1.0, &prev.f);
    let ft = ft.scaled(1.0 / dt2);
    let fx = cur.f.dx(&space);
    let refs: Vec<&LocalMaxwellian> = at.cells.iter().collect();
    let lf = if ctx.config.collisionless {
        DistField::zeros(n, nodes)
    } else {
        DistField::from_cells(apply_l_batch(ctx.table, grid, &refs, &cur.f.rows()))
    };
    let hbar = match (mode, source) {
        (SourceMode::Model, Some(s)) => s.clone(),
        (SourceMode::Model, None) => source_terms(ctx, &cur.f, eps, at),
        (SourceMode::Forcing, _) => {
            let mut h = ft.clone();
            for i in 0..n {
                let (row, d) = (h.cell_mut(i), fx.cell(i));
                for k in 0..nodes {
                    row[k] += vel[k] * d[k];
                }
            }
            h.axpy(1.0 / eps, &lf);
            h
        }
    };

    // micro parts at the three times for ∂_t (I-P) f
    let micro = |fl: &RemainderField, a: &BackboneAt| split_macro(grid, &a.cells, &fl.f);
    let (pf, qf) = micro(cur, at);
    let (_, q_prev) = micro(prev, ats[0]);
    let (_, q_next) = micro(next, ats[2]);
    let mut qt = q_next;
    qt.axpy(-1.0, &q_prev);
    let qt = qt.scaled(1.0 / dt2);
    let qx = qf.dx(&space);

    // ℓ + h = -(∂_t + p̂∂_x)(I-P)f - Lf/ε - P f · ½(∂_t + p̂∂_x)log M + h̄
    let mut rhs = hbar.clone();
    rhs.axpy(-1.0, &qt);
    rhs.axpy(-1.0 / eps, &lf);
    for i in 0..n {
        let (row, qxi, pfi, hd) = (rhs.cell_mut(i), qx.cell(i), pf.cell(i), at.half_dlog.cell(i));
        for k in 0..nodes {
            row[k] -= vel[k] * qxi[k] + pfi[k] * hd[k];
        }
    }

    let dcol = |src: &[[f64; 5]], a: usize| -> Vec<f64> { space.d1(&src.iter().map(|v| v[a]).collect::<Vec<_>>()) };
    let dx_c: Vec<Vec<f64>> = (0..5).map(|a| dcol(&c_cur, a)).collect();
    let mut lhs_norm = [0.0; 6];
    let mut res_norm = [0.0; 6];
    for i in 0..n {
        let dt_c: [f64; 5] = std::array::from_fn(|a| (c_next[i][a] - c_prev[i][a]) / dt2);
        let mut lhs = [0.0; MACRO_BASIS];
        lhs[0] = dt_c[0];
        lhs[1] = dt_c[1] + dx_c[4][i];
        lhs[2] = dt_c[2];
        lhs[3] = dt_c[3];
        lhs[4] = dt_c[4];
        lhs[5] = dx_c[0][i];
        lhs[8] = dx_c[1][i];
        lhs[11] = dx_c[2][i];
        lhs[12] = dx_c[3][i];
        let got = project_macro_basis(grid, &at.cells[i], rhs.cell(i));
        let group = |j: usize| match j {
            0 => 0,
            1..=3 => 1,
            4 => 2,
            5..=7 => 3,
            8..=10 => 4,
            _ => 5,
        };
        for j in 0..MACRO_BASIS {
            let g = group(j);
            lhs_norm[g] += lhs[j].powi(2) + got[j].powi(2);
            res_norm[g] += (lhs[j] - got[j]).powi(2);
        }
    }
    let total: f64 = lhs_norm.iter().sum();
    let comparison = std::array::from_fn(|g| rel(res_norm[g], total));

    // ∂_t⟨f, χM^{1/2}⟩ + ∂_x⟨p̂f, χM^{1/2}⟩ - ⟨f, χ(∂_t + p̂∂_x)M^{1/2}⟩
    //   + ⟨Lf/ε - h̄, χM^{1/2}⟩ = 0
    let mom = |fl: &RemainderField, a: &BackboneAt| -> Vec<[f64; 5]> {
        a.cells.iter().enumerate().map(|(i, c)| c.moments(grid, fl.f.cell(i))).collect()
    };
    let (m_prev, m_next) = (mom(prev, ats[0]), mom(next, ats[2]));
    let flux: Vec<[f64; 5]> = at
        .cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let v: Vec<f64> = cur.f.cell(i).iter().zip(&vel).map(|(x, u)| x * u).collect();
            c.moments(grid, &v)
        })
        .collect();
    let mut cons_res = [0.0; 5];
    let mut cons_scale = [0.0; 5];
    let flux_dx: Vec<Vec<f64>> = (0..5).map(|a| dcol(&flux, a)).collect();
    for i in 0..n {
        let c = &at.cells[i];
        let f = cur.f.cell(i);
        let hd = at.half_dlog.cell(i);
        let extra: Vec<f64> = (0..nodes).map(|k| 2.0 * hd[k] * f[k]).collect();
        let g_m = c.moments(grid, &extra);
        let mut src = lf.cell(i).iter().map(|x| x / eps).collect::<Vec<f64>>();
        src.iter_mut().zip(hbar.cell(i)).for_each(|(s, h)| *s -= h);
        let s_m = c.moments(grid, &src);
        for a in 0..5 {
            let terms = [
                (m_next[i][a] - m_prev[i][a]) / dt2,
                flux_dx[a][i],
                -0.5 * g_m[a],
                s_m[a],
            ];
            cons_res[a] += terms.iter().sum::<f64>().powi(2);
            cons_scale[a] += terms.iter().map(|x| x * x).sum::<f64>();
        }
    }
    let total: f64 = cons_scale.iter().sum();
    let conservation = std::array::from_fn(|a| rel(cons_res[a], total));
    MacroResidual {
        t: cur.t,
        conservation,
        comparison,
        coefficients: ProjectionCoefficients {
            cells: c_cur.into_iter().map(MacroCoeffs::from_array).collect(),
        },
    }
}

fn rel(res_sq: f64, scale_sq: f64) -> f64 {
    if scale_sq > 0.0 {
        (res_sq / scale_sq).sqrt()
    } else {
        0.0
    }
}

/// One row of a sweep time series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeriesRow {
    pub t: f64,
    pub h2_norm: f64,
    pub e: f64,
    pub d_integral: f64,
    pub min_f: f64,
}

/// One full run at fixed `ε`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSeries {
    pub epsilon: f64,
    pub dt: f64,
    pub rows: Vec<SeriesRow>,
    pub sup_h2: f64,
    pub max_e: f64,
    pub min_f: f64,
    pub min_f_initial: f64,
    pub peak_m: f64,
    /// `max_t max(0, (E(t) - E(0)) / (ε^{2k+3} t))`
    pub c_fit: f64,
    /// the same with `E(t) + ∫D`
    pub c_fit_total: f64,
    pub d_terms_nonnegative: bool,
    /// largest `|∬χF(t) - ∬χF(0)| / (scale · t)`
    pub conservation_drift: f64,
    /// largest relative macroscopic residuals over the second half of the
    /// run, after the initial layer
    pub macro_conservation: f64,
    pub macro_comparison: f64,
    /// fitted constant of the macroscopic dissipation inequality
    pub md_fit: f64,
}

/// Quantities recorded at every step of a run.
struct Sample {
    t: f64,
    h2: f64,
    energy: EnergyReport,
    positivity: Positivity,
    totals: [f64; 5],
}

fn sample(ctx: &SolverContext, field: &RemainderField, at: &BackboneAt) -> Sample {
    Sample {
        t: field.t,
        h2: h2_distance_to_maxwellian(ctx, field, at),
        energy: energy_functional(ctx, field, at),
        positivity: positivity_check(ctx, field, at),
        totals: totals(ctx, field, at),
    }
}

/// Integrate from the constructed initial data to `t_final` at fixed `ε`.
pub fn run_epsilon(ctx: &SolverContext, epsilon: f64) -> Result<RunSeries, RemainderError> {
    let dt = ctx.config.dt;
    let steps = ctx.config.steps();
    let k = ctx.backbone.k as i32;
    let mut field = ctx.initial_field(epsilon)?;
    let mut at = ctx.at(epsilon, 0.0)?;
    let mut samples = vec![sample(ctx, &field, &at)];
    let mut prev: Option<(RemainderField, BackboneAt)> = None;
    let mut macro_cons: f64 = 0.0;
    let mut macro_cmp: f64 = 0.0;
    for n in 0..steps {
        let out = imex_step(ctx, &field, &at, dt)?;
        if let Some((pf, pa)) = prev.as_ref().filter(|_| 2 * n >= steps) {
            let r = macro_diagnostics(
                ctx,
                [pf, &field, &out.field],
                [pa, &at, &out.next],
                Some(&out.source),
                SourceMode::Model,
            );
            macro_cons = macro_cons.max(r.conservation.iter().cloned().fold(0.0, f64::max));
            macro_cmp = macro_cmp.max(r.comparison.iter().cloned().fold(0.0, f64::max));
        }
        prev = Some((field, at));
        field = out.field;
        field.t = (n + 1) as f64 * dt;
        at = out.next;
        samples.push(sample(ctx, &field, &at));
    }

    let mut rows = Vec::with_capacity(samples.len());
    let mut d_int = 0.0;
    for (j, s) in samples.iter().enumerate() {
        if j > 0 {
            d_int += step_integral(s.t - samples[j - 1].t, samples[j - 1].energy.d, s.energy.d);
        }
        rows.push(SeriesRow {
            t: s.t,
            h2_norm: s.h2,
            e: s.energy.e,
            d_integral: d_int,
            min_f: s.positivity.min,
        });
    }
    let e0 = rows[0].e;
    let scale = epsilon.powi(2 * k + 3);
    let fit = |total: bool| {
        rows.iter()
            .skip(1)
            .map(|r| {
                let lhs = r.e + if total { r.d_integral } else { 0.0 };
                ((lhs - e0) / (scale * r.t)).max(0.0)
            })
            .fold(0.0, f64::max)
    };
    let t0 = samples[0].totals;
    let mass = t0[0].abs().max(f64::MIN_POSITIVE);
    let drift = samples
        .iter()
        .skip(1)
        .map(|s| {
            (0..5)
                .map(|a| {
                    let sc = if a == 0 || a == 4 { t0[a].abs() } else { mass };
                    (s.totals[a] - t0[a]).abs() / (sc.max(f64::MIN_POSITIVE) * s.t)
                })
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    Ok(RunSeries {
        epsilon,
        dt,
        sup_h2: rows.iter().map(|r| r.h2_norm).fold(0.0, f64::max),
        max_e: rows.iter().map(|r| r.e).fold(0.0, f64::max),
        min_f: rows.iter().map(|r| r.min_f).fold(f64::INFINITY, f64::min),
        min_f_initial: rows[0].min_f,
        peak_m: samples[0].positivity.peak_m,
        c_fit: fit(false),
        c_fit_total: fit(true),
        d_terms_nonnegative: samples.iter().all(|s| s.energy.all_nonnegative()),
        conservation_drift: drift,
        macro_conservation: macro_cons,
        macro_comparison: macro_cmp,
        md_fit: md_fit(&samples, epsilon, k as usize, ctx.backbone.gradient.iter().cloned().fold(0.0, f64::max)),
        rows,
    })
}

/// `∫ D` over one step, exact when `D` is exponential in time (the stiff
/// initial layer) and the trapezoid rule otherwise.
pub fn step_integral(dt: f64, d0: f64, d1: f64) -> f64 {
    if d0 > 0.0 && d1 > 0.0 {
        let r = (d0 / d1).ln();
        if r.abs() > 1e-6 {
            return dt * (d0 - d1) / r;
        }
    }
    0.5 * dt * (d0 + d1)
}

/// Smallest `C ≥ 0` with
/// `∫‖∂_xPf‖² ≤ A(t) + A(0) + C ∫(ε^{-2}|(I-P)f|²_σ + |∂_x(I-P)f|²_σ + Z‖f‖² + ε^{2k+2})`
/// along the run, where `A = ‖f‖ ‖∂_x f‖` bounds the interaction functional.
fn md_fit(samples: &[Sample], eps: f64, k: usize, z: f64) -> f64 {
    let lhs = |s: &Sample| s.energy.raw("dx_macro");
    let rhs = |s: &Sample| {
        s.energy.raw("sigma_micro") / (eps * eps)
            + s.energy.raw("sigma_dx_micro")
            + z * s.energy.raw("f")
            + eps.powi(2 * k as i32 + 2)
    };
    let a = |s: &Sample| (s.energy.raw("f") * s.energy.raw("dx_f")).sqrt();
    let (mut il, mut ir) = (0.0, 0.0);
    let mut c: f64 = 0.0;
    for j in 1..samples.len() {
        let dt = samples[j].t - samples[j - 1].t;
        il += step_integral(dt, lhs(&samples[j - 1]), lhs(&samples[j]));
        ir += step_integral(dt, rhs(&samples[j - 1]), rhs(&samples[j]));
        if ir > 0.0 {
            c = c.max((il - a(&samples[j]) - a(&samples[0])) / ir);
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub epsilons: Vec<f64>,
    /// repeat every run with `dt / 2` to check the stability of `C_fit`
    pub dt_halving: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            epsilons: vec![0.1, 0.05, 0.025],
            dt_halving: true,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), RemainderError> {
        if self.epsilons.len() < 3 {
            return Err(RemainderError::Config("the sweep needs at least 3 epsilons".into()));
        }
        if !self.epsilons.windows(2).all(|w| w[1] < w[0]) {
            return Err(RemainderError::Config("epsilons must be strictly decreasing".into()));
        }
        if !self.epsilons.iter().all(|e| *e > 0.0 && *e <= 1.0) {
            return Err(RemainderError::Config("epsilons must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct SweepResult {
    pub epsilons: Vec<f64>,
    pub runs: Vec<RunSeries>,
    /// reruns at `dt / 2`, aligned with `runs` when enabled
    pub halved: Vec<RunSeries>,
    /// log-log slope of `sup_t ‖F - M‖_{H²}` against `ε`; `None` when degenerate
    pub slope: Option<f64>,
}

impl SweepResult {
    pub fn degenerate(&self) -> bool {
        self.slope.is_none()
    }

    /// `C_fit` at `dt` and `dt / 2` agree within a factor 2 (both zero counts).
    pub fn c_fit_stable(&self) -> bool {
        !self.halved.is_empty()
            && self.runs.iter().zip(&self.halved).all(|(a, b)| {
                let (x, y) = (a.c_fit, b.c_fit);
                (x == 0.0 && y == 0.0) || (x > 0.0 && y > 0.0 && x.max(y) <= 2.0 * x.min(y))
            })
    }
}

/// Least-squares slope of `ln y` against `ln x`; `None` unless every value is
/// positive and finite.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 || x.len() != y.len() || y.iter().chain(x).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return None;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Run every `ε` of the sweep. `observe` sees each finished run, so callers
/// can persist partial results.
pub fn knudsen_sweep(
    ctx: &SolverContext,
    sweep: &SweepConfig,
    mut observe: impl FnMut(&RunSeries),
) -> Result<SweepResult, RemainderError> {
    sweep.validate()?;
    let mut out = SweepResult {
        epsilons: sweep.epsilons.clone(),
        ..Default::default()
    };
    let halved_ctx = if sweep.dt_halving {
        let mut cfg = ctx.config;
        cfg.dt *= 0.5;
        Some(SolverContext {
            table: ctx.table,
            grid: ctx.grid.clone(),
            backbone: ctx.backbone.clone(),
            config: cfg,
            reference: ctx.reference.clone(),
            reference_cell: ctx.reference_cell.clone(),
            factors: Mutex::new(Vec::new()),
        })
    } else {
        None
    };
    for &eps in &sweep.epsilons {
        let wrap = |out: &SweepResult, e: RemainderError| RemainderError::Sweep {
            epsilon: eps,
            partial: Box::new(out.clone()),
            source: Box::new(e),
        };
        match run_epsilon(ctx, eps) {
            Ok(r) => {
                observe(&r);
                out.runs.push(r);
            }
            Err(e) => return Err(wrap(&out, e)),
        }
        if let Some(hc) = &halved_ctx {
            match run_epsilon(hc, eps) {
                Ok(r) => out.halved.push(r),
                Err(e) => return Err(wrap(&out, e)),
            }
        }
    }
    let sup: Vec<f64> = out.runs.iter().map(|r| r.sup_h2).collect();
    out.slope = loglog_slope(&out.epsilons, &sup);
    Ok(out)
}

/// Fill a backbone with a time-independent, spatially varying state (test
/// and example helper).
pub fn frozen_backbone(
    space: SpatialGrid,
    grid: &MomentumGrid,
    k: usize,
    t_final: f64,
    state: impl Fn(f64) -> CellState,
) -> Backbone {
    let mut b = Backbone::constant(space, grid, state(0.0), k, t_final);
    let row: Vec<Prim> = (0..space.cells).map(|i| prim_of(&state(space.x(i)))).collect();
    for e in b.euler.iter_mut() {
        *e = row.clone();
    }
    b.gradient = gradient_factor(&space, &row);
    b
}

/// `d log M` coefficient matrix re-exported for diagnostics.
pub fn dlog_matrix(cell: &LocalMaxwellian) -> Matrix5<f64> {
    dlogm_coeffs(&cell.juttner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase_space::{build_momentum_grid, MomentumGridConfig};

    fn small() -> (MomentumGrid, KernelTable) {
        let g = build_momentum_grid(&MomentumGridConfig {
            radius: 3.0,
            points_per_axis: 8,
        })
        .unwrap();
        let t = KernelTable::build(&g, 1e-3);
        (g, t)
    }

    fn rest() -> CellState {
        CellState {
            n0: 1.0,
            u: [0.0; 3],
            t0: 0.2,
        }
    }

    #[test]
    fn translating_profile_converges_to_the_shift() {
        let err = |n: usize| {
            let space = SpatialGrid::new(n, 1.0).unwrap();
            let vel = [0.5, -0.75];
            let prof = |x: f64| (2.0 * std::f64::consts::PI * x).sin();
            let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![prof(space.x(i)); 2]).collect();
            let mut f = DistField::from_cells(rows);
            let steps = 4 * n;
            let dt = 1.0 / steps as f64;
            for _ in 0..steps {
                f = transport_step(&space, &vel, &f, dt, TransportScheme::Upwind3);
            }
            let mut e: f64 = 0.0;
            for i in 0..n {
                for (k, v) in vel.iter().enumerate() {
                    e = e.max((f.cell(i)[k] - prof(space.x(i) - v)).abs());
                }
            }
            e
        };
        let (a, b) = (err(32), err(64));
        assert!(b < 0.02 && a / b > 4.0, "{a} {b}");
    }

    #[test]
    fn upwind1_keeps_sign() {
        let space = SpatialGrid::new(16, 1.0).unwrap();
        let vel = [0.9, -0.3, 0.0];
        let rows: Vec<Vec<f64>> = (0..16).map(|i| vec![if i % 5 == 0 { 1.0 } else { 0.0 }; 3]).collect();
        let mut f = DistField::from_cells(rows);
        for _ in 0..40 {
            f = transport_step(&space, &vel, &f, 0.4 * space.h(), TransportScheme::Upwind1);
            assert!(f.data.iter().all(|x| *x >= 0.0));
        }
    }

    #[test]
    fn zero_remainder_stays_zero_on_constant_backbone() {
        let (g, t) = small();
        let g = Arc::new(g);
        let space = SpatialGrid::new(8, 2.0 * std::f64::consts::PI).unwrap();
        let bb = Arc::new(Backbone::constant(space, &g, rest(), 2, 0.5));
        let cfg = SolverConfig {
            dt: 0.05,
            t_final: 0.1,
            ..Default::default()
        };
        let ctx = SolverContext::new(&t, g, bb, cfg).unwrap();
        let mut field = RemainderField::zeros(&ctx, 0.1).unwrap();
        let mut at = ctx.at(0.1, 0.0).unwrap();
        for _ in 0..2 {
            let out = imex_step(&ctx, &field, &at, 0.05).unwrap();
            field = out.field;
            at = out.next;
        }
        assert!(field.f.data.iter().all(|x| *x == 0.0));
        let e = energy_functional(&ctx, &field, &at);
        assert_eq!((e.e, e.d), (0.0, 0.0));
        assert_eq!(h2_distance_to_maxwellian(&ctx, &field, &at), 0.0);
    }

    #[test]
    fn stiff_relaxation_decays_at_least_at_the_gap_rate() {
        let (g, t) = small();
        let g = Arc::new(g);
        let space = SpatialGrid::new(4, 1.0).unwrap();
        let bb = Arc::new(Backbone::constant(space, &g, rest(), 2, 0.5));
        let eps = 0.1;
        let cfg = SolverConfig {
            dt: 0.02,
            t_final: 0.1,
            ..Default::default()
        };
        let ctx = SolverContext::new(&t, g.clone(), bb, cfg).unwrap();
        let at = ctx.at(eps, 0.0).unwrap();
        let cell = &at.cells[0];
        // gap of L on N^⊥ from the dense matrix
        let l = dense_l(&t, &g, cell);
        let eig = l.symmetric_eigenvalues();
        let mut ev: Vec<f64> = eig.iter().cloned().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let gap = ev[5];
        assert!(gap > 0.0);
        let u: Vec<f64> = (0..g.len())
            .map(|k| cell.sqrt_m[k] * (g.nodes[k][0].powi(3) - g.p0[k] * g.nodes[k][1]))
            .collect();
        let u = cell.micro_part(&g, &u);
        let mut f = DistField::from_cells(vec![u; space.cells]);
        let bound = 1.0 / (1.0 + cfg.dt * gap / eps);
        let mut prev = f.l2_sq(&space, &g).sqrt();
        for _ in 0..5 {
            f = implicit_solve(&ctx, &f, cfg.dt / eps, &at).unwrap();
            let (_, q) = split_macro(&g, &at.cells, &f);
            let now = q.l2_sq(&space, &g).sqrt();
            assert!(now <= prev * bound * (1.0 + 1e-6), "{now} {prev} {bound}");
            prev = now;
        }
    }

    #[test]
    fn energy_is_quadratic_and_macro_modes_kill_micro_terms() {
        let (g, t) = small();
        let g = Arc::new(g);
        let space = SpatialGrid::new(8, 2.0 * std::f64::consts::PI).unwrap();
        let bb = Arc::new(Backbone::constant(space, &g, rest(), 2, 0.5));
        let ctx = SolverContext::new(&t, g.clone(), bb.clone(), SolverConfig::default()).unwrap();
        let at = ctx.at(0.1, 0.0).unwrap();
        let rows: Vec<Vec<f64>> = (0..space.cells)
            .map(|i| {
                let x = space.x(i);
                let c = MacroCoeffs {
                    a: x.sin(),
                    b: [0.3 * x.cos(), 0.0, 0.1],
                    c: 0.2 * (2.0 * x).sin(),
                };
                at.cells[i].reconstruct(&g, &c)
            })
            .collect();
        let f = DistField::from_cells(rows);
        let field = RemainderField::new(f.clone(), 0.1, 0.0, bb.clone()).unwrap();
        let r1 = energy_functional(&ctx, &field, &at);
        for label in ["w0_micro", "w1_dx_micro", "sigma_micro", "sigma_dx_micro", "sigma_dxx_micro"] {
            assert!(r1.raw(label) <= 1e-20 * r1.raw("f").max(1.0), "{label} {}", r1.raw(label));
        }
        let field2 = RemainderField::new(f.scaled(3.0), 0.1, 0.0, bb).unwrap();
        let r2 = energy_functional(&ctx, &field2, &at);
        assert!((r2.e - 9.0 * r1.e).abs() <= 1e-12 * r2.e);
        assert!((r2.d - 9.0 * r1.d).abs() <= 1e-12 * r2.d.max(1e-300));
        assert!(r1.all_nonnegative());
    }

    #[test]
    fn h2_distance_is_linear_in_epsilon_without_remainder() {
        let (g, t) = small();
        let g = Arc::new(g);
        let space = SpatialGrid::new(8, 2.0 * std::f64::consts::PI).unwrap();
        let mut bb = Backbone::constant(space, &g, rest(), 2, 0.5);
        let bump: Vec<Vec<f64>> = (0..space.cells)
            .map(|i| (0..g.len()).map(|k| space.x(i).cos() * g.nodes[k][0]).collect())
            .collect();
        let bump = DistField::from_cells(bump);
        for s in bb.fbar[0].iter_mut() {
            *s = bump.clone();
        }
        let bb = Arc::new(bb);
        let ctx = SolverContext::new(&t, g, bb.clone(), SolverConfig::default()).unwrap();
        let d: Vec<f64> = [0.1, 0.05]
            .iter()
            .map(|&e| {
                let at = ctx.at(e, 0.0).unwrap();
                let fl = RemainderField::zeros(&ctx, e).unwrap();
                h2_distance_to_maxwellian(&ctx, &fl, &at)
            })
            .collect();
        assert!(d[0] > 0.0 && (d[0] - 2.0 * d[1]).abs() <= 1e-12 * d[0]);
    }

    #[test]
    fn manufactured_macro_field_satisfies_comparison_to_second_order() {
        let (g, t) = small();
        let g = Arc::new(g);
        let res = |n: usize| {
            let space = SpatialGrid::new(n, 2.0 * std::f64::consts::PI).unwrap();
            let bb = Arc::new(frozen_backbone(space, &g, 2, 0.5, |x| CellState {
                n0: 1.0 + 0.05 * x.sin(),
                u: [0.02 * x.cos(), 0.0, 0.0],
                t0: 0.2 + 0.01 * x.cos(),
            }));
            let ctx = SolverContext::new(&t, g.clone(), bb.clone(), SolverConfig::default()).unwrap();
            let ats: Vec<BackboneAt> = [0.0, 0.025, 0.05].iter().map(|&s| ctx.at(0.1, s).unwrap()).collect();
            let fields: Vec<RemainderField> = ats
                .iter()
                .map(|at| {
                    let rows: Vec<Vec<f64>> = (0..n)
                        .map(|i| {
                            let x = space.x(i);
                            let c = MacroCoeffs {
                                a: x.sin(),
                                b: [x.cos(), 0.2 * x.sin(), 0.0],
                                c: 0.5 * x.cos(),
                            };
                            at.cells[i].reconstruct(&g, &c)
                        })
                        .collect();
                    RemainderField::new(DistField::from_cells(rows), 0.1, at.t, bb.clone()).unwrap()
                })
                .collect();
            let r = macro_diagnostics(
                &ctx,
                [&fields[0], &fields[1], &fields[2]],
                [&ats[0], &ats[1], &ats[2]],
                None,
                SourceMode::Forcing,
            );
            let m = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
            (m(&r.comparison), m(&r.conservation))
        };
        let (a, b) = (res(16), res(32));
        assert!(a.0 < 0.05 && a.0 / b.0 > 3.0, "{a:?} {b:?}");
        assert!(a.1 < 0.05 && a.1 / b.1 > 3.0, "{a:?} {b:?}");
    }

    #[test]
    fn step_integral_is_exact_for_exponentials() {
        let (dt, lam) = (0.3f64, 7.0f64);
        let exact = (1.0 - (-lam * dt).exp()) / lam;
        assert!((step_integral(dt, 1.0, (-lam * dt).exp()) - exact).abs() < 1e-14);
        assert_eq!(step_integral(dt, 2.0, 2.0), 0.6);
    }

    #[test]
    fn slope_of_a_power_law() {
        let x = [0.1, 0.05, 0.025];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.1)).collect();
        assert!((loglog_slope(&x, &y).unwrap() - 1.1).abs() < 1e-12);
        assert!(loglog_slope(&x, &[0.0, 0.0, 0.0]).is_none());
    }

    #[test]
    fn sweep_config_rules() {
        assert!(SweepConfig::default().validate().is_ok());
        let bad = SweepConfig {
            epsilons: vec![0.1, 0.1, 0.05],
            dt_halving: false,
        };
        assert!(bad.validate().is_err());
    }
}
