//! Smooth relativistic Euler flow on the periodic x1 axis: closures,
//! conservative-to-primitive recovery, an RK4 stepper and the size
//! functionals `Z`, `𝒵` with the time-window test.
//!
//! Primitive vector `W = (n0, u1, u2, u3, T0)`, conserved vector
//! `U = (D, m1, m2, m3, E)` with `E = T^00`.

use crate::equilibrium::{BesselTriple, CellState, EquilibriumError, Juttner};
use crate::linearized::rate_y;
use crate::phase_space::{MomentumGrid, SpatialGrid};
use nalgebra::{Matrix2, Matrix5, Vector2, Vector5};
use std::sync::Arc;
use thiserror::Error;

pub use crate::equilibrium::thermo_closure;

pub type Prim = [f64; 5];
pub type Cons = [f64; 5];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EulerError {
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error("time step {dt} exceeds the CFL bound {limit}")]
    Cfl { dt: f64, limit: f64 },
    #[error("primitive recovery failed: {0}")]
    Recovery(String),
    #[error("non-finite value in the fluid state")]
    NonFinite,
}

pub fn prim_of(s: &CellState) -> Prim {
    [s.n0, s.u[0], s.u[1], s.u[2], s.t0]
}

pub fn state_of(w: &Prim) -> CellState {
    CellState {
        n0: w[0],
        u: [w[1], w[2], w[3]],
        t0: w[4],
    }
}

/// `d log M = χ · (C dW)` with `χ = (1, p1, p2, p3, p0)`; rows index χ,
/// columns index W.
pub fn dlogm_coeffs(j: &Juttner) -> Matrix5<f64> {
    let g = j.gamma;
    let u = j.state.u;
    let u0 = j.u0;
    let mut c = Matrix5::zeros();
    c[(0, 0)] = 1.0 / j.state.n0;
    for i in 0..3 {
        c[(1 + i, 1 + i)] = g;
        c[(4, 1 + i)] = -g * u[i] / u0;
    }
    // d/dT = -γ² d/dγ, d log M/dγ = 3/γ + K1/K2 - p0 u0 + p.u
    let g2 = g * g;
    c[(0, 4)] = -g2 * (3.0 / g + j.bessel.k1 / j.bessel.k2);
    for i in 0..3 {
        c[(1 + i, 4)] = -g2 * u[i];
    }
    c[(4, 4)] = g2 * u0;
    c
}

/// Quadrature moments of a Jüttner on the momentum lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeMoments {
    pub u: Cons,
    pub flux: Cons,
    /// `∫ χ χ^T M`
    pub gram: Matrix5<f64>,
    /// `∫ χ χ^T p̂1 M`
    pub gram_flux: Matrix5<f64>,
}

pub fn chi(grid: &MomentumGrid, k: usize) -> [f64; 5] {
    let p = grid.nodes[k];
    [1.0, p[0], p[1], p[2], grid.p0[k]]
}

pub fn lattice_moments(grid: &MomentumGrid, m: &[f64]) -> LatticeMoments {
    let mut gram = Matrix5::zeros();
    let mut gram_flux = Matrix5::zeros();
    let n = grid.len();
    for a in 0..5 {
        for b in a..5 {
            let v: Vec<f64> = (0..n)
                .map(|k| {
                    let c = chi(grid, k);
                    c[a] * c[b] * m[k]
                })
                .collect();
            let vf: Vec<f64> = (0..n)
                .map(|k| {
                    let c = chi(grid, k);
                    c[a] * c[b] * m[k] * grid.nodes[k][0] / grid.p0[k]
                })
                .collect();
            gram[(a, b)] = grid.integrate(&v);
            gram[(b, a)] = gram[(a, b)];
            gram_flux[(a, b)] = grid.integrate(&vf);
            gram_flux[(b, a)] = gram_flux[(a, b)];
        }
    }
    let u = [gram[(0, 0)], gram[(0, 1)], gram[(0, 2)], gram[(0, 3)], gram[(0, 4)]];
    let flux = [
        gram_flux[(0, 0)],
        gram_flux[(0, 1)],
        gram_flux[(0, 2)],
        gram_flux[(0, 3)],
        gram_flux[(0, 4)],
    ];
    LatticeMoments {
        u,
        flux,
        gram,
        gram_flux,
    }
}

/// Equation of state used to relate conserved and primitive variables.
#[derive(Debug, Clone)]
pub enum Closure {
    /// Bessel-function closure of the continuum Jüttner.
    Analytic,
    /// Quadrature moments on the momentum lattice; makes the discrete kinetic
    /// hierarchy exactly solvable.
    Lattice(Arc<MomentumGrid>),
}

fn analytic_parts(s: &CellState) -> Result<(f64, f64), EquilibriumError> {
    let b = BesselTriple::new(1.0 / s.t0)?;
    let z = b.z;
    Ok((b.enthalpy(), -z * z * b.enthalpy_dz()))
}

impl Closure {
    pub fn conserved(&self, s: &CellState) -> Result<Cons, EulerError> {
        match self {
            Closure::Analytic => {
                s.validate(f64::INFINITY)?;
                let (h, _) = analytic_parts(s)?;
                let u0 = s.u0();
                let w = s.n0 * h;
                Ok([
                    s.n0 * u0,
                    w * u0 * s.u[0],
                    w * u0 * s.u[1],
                    w * u0 * s.u[2],
                    w * u0 * u0 - s.n0 * s.t0,
                ])
            }
            Closure::Lattice(g) => {
                let m = Juttner::new(*s)?.on_grid(g);
                Ok(lattice_moments(g, &m).u)
            }
        }
    }

    /// Flux in the x1 direction.
    pub fn flux(&self, s: &CellState) -> Result<Cons, EulerError> {
        match self {
            Closure::Analytic => {
                s.validate(f64::INFINITY)?;
                let (h, _) = analytic_parts(s)?;
                let w = s.n0 * h;
                let u0 = s.u0();
                let p = s.n0 * s.t0;
                Ok([
                    s.n0 * s.u[0],
                    w * s.u[0] * s.u[0] + p,
                    w * s.u[1] * s.u[0],
                    w * s.u[2] * s.u[0],
                    w * u0 * s.u[0],
                ])
            }
            Closure::Lattice(g) => {
                let m = Juttner::new(*s)?.on_grid(g);
                Ok(lattice_moments(g, &m).flux)
            }
        }
    }

    /// `∂U/∂W`
    pub fn jacobian(&self, s: &CellState) -> Result<Matrix5<f64>, EulerError> {
        match self {
            Closure::Analytic => {
                s.validate(f64::INFINITY)?;
                let (h, ht) = analytic_parts(s)?;
                let n = s.n0;
                let u = s.u;
                let u0 = s.u0();
                let mut j = Matrix5::zeros();
                j[(0, 0)] = u0;
                for i in 0..3 {
                    j[(0, 1 + i)] = n * u[i] / u0;
                }
                for a in 0..3 {
                    j[(1 + a, 0)] = h * u0 * u[a];
                    for i in 0..3 {
                        let d = if a == i { u0 } else { 0.0 };
                        j[(1 + a, 1 + i)] = n * h * (d + u[i] * u[a] / u0);
                    }
                    j[(1 + a, 4)] = n * ht * u0 * u[a];
                }
                j[(4, 0)] = h * u0 * u0 - s.t0;
                for i in 0..3 {
                    j[(4, 1 + i)] = 2.0 * n * h * u[i];
                }
                j[(4, 4)] = n * ht * u0 * u0 - n;
                Ok(j)
            }
            Closure::Lattice(g) => {
                let jt = Juttner::new(*s)?;
                let m = jt.on_grid(g);
                Ok(lattice_moments(g, &m).gram * dlogm_coeffs(&jt))
            }
        }
    }

    /// Conservative-to-primitive inversion.
    pub fn recover(
        &self,
        u: &Cons,
        guess: Option<&CellState>,
        u_max: f64,
    ) -> Result<CellState, EulerError> {
        let first = recover_analytic(u, guess)?;
        let s = match self {
            Closure::Analytic => first,
            Closure::Lattice(_) => {
                let mut w = prim_of(guess.unwrap_or(&first));
                let target = Vector5::from(*u);
                let scale = target.amax();
                let mut ok = false;
                for _ in 0..50 {
                    let st = state_of(&w);
                    let r = Vector5::from(self.conserved(&st)?) - target;
                    if r.amax() <= 1e-14 * scale {
                        ok = true;
                        break;
                    }
                    let j = self.jacobian(&st)?;
                    let dw = j
                        .lu()
                        .solve(&r)
                        .ok_or_else(|| EulerError::Recovery("singular lattice Jacobian".into()))?;
                    for a in 0..5 {
                        w[a] -= dw[a];
                    }
                    if !(w[0] > 0.0 && w[4] > 0.0) {
                        return Err(EulerError::Recovery("Newton left the physical region".into()));
                    }
                }
                if !ok {
                    // accept if the residual reached the round-off floor
                    let r = Vector5::from(self.conserved(&state_of(&w))?) - target;
                    if r.amax() > 1e-12 * scale {
                        return Err(EulerError::Recovery(format!(
                            "lattice Newton stalled at residual {:.3e}",
                            r.amax() / scale
                        )));
                    }
                }
                state_of(&w)
            }
        };
        s.validate(u_max)?;
        Ok(s)
    }
}

/// Newton on `(s = |u|, T0)` for the Bessel closure:
/// `h(T) s = |m|/D`, `h sqrt(1+s²) - T/sqrt(1+s²) = E/D`.
pub fn recover_analytic(u: &Cons, guess: Option<&CellState>) -> Result<CellState, EulerError> {
    if !u.iter().all(|x| x.is_finite()) {
        return Err(EulerError::NonFinite);
    }
    let d = u[0];
    let mv = [u[1], u[2], u[3]];
    let mm = (mv[0] * mv[0] + mv[1] * mv[1] + mv[2] * mv[2]).sqrt();
    if !(d > 0.0) {
        return Err(EulerError::Recovery(format!("non-positive D = {d}")));
    }
    let a = mm / d;
    let b = u[4] / d;
    let (mut s, mut t) = match guess {
        Some(g) => (g.speed(), g.t0),
        None => (a, ((b - 1.0) / 1.5).max(0.05)),
    };
    if mm == 0.0 {
        s = 0.0;
    }
    let mut converged = false;
    for _ in 0..100 {
        let bt = BesselTriple::new(1.0 / t)?;
        let z = bt.z;
        let h = bt.enthalpy();
        let ht = -z * z * bt.enthalpy_dz();
        let u0 = (1.0 + s * s).sqrt();
        let f = Vector2::new(h * s - a, h * u0 - t / u0 - b);
        if f[0].abs() <= 1e-14 * (1.0 + a) && f[1].abs() <= 1e-14 * (1.0 + b) {
            converged = true;
            break;
        }
        let j = Matrix2::new(
            h,
            ht * s,
            h * s / u0 + t * s / (u0 * u0 * u0),
            ht * u0 - 1.0 / u0,
        );
        let step = j
            .lu()
            .solve(&f)
            .ok_or_else(|| EulerError::Recovery("singular Jacobian".into()))?;
        let mut lam = 1.0;
        while t - lam * step[1] <= 0.0 {
            lam *= 0.5;
            if lam < 1e-6 {
                return Err(EulerError::Recovery("temperature step collapsed".into()));
            }
        }
        s = (s - lam * step[0]).max(0.0);
        t -= lam * step[1];
    }
    if !converged {
        return Err(EulerError::Recovery("Newton did not converge".into()));
    }
    let u0 = (1.0 + s * s).sqrt();
    let dir = if mm > 0.0 {
        [mv[0] / mm, mv[1] / mm, mv[2] / mm]
    } else {
        [0.0; 3]
    };
    Ok(CellState {
        n0: d / u0,
        u: [s * dir[0], s * dir[1], s * dir[2]],
        t0: t,
    })
}

/// Smooth initial data: a constant state times `1 + δ sin(2π m x / L)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerInit {
    pub density: f64,
    pub temperature: f64,
    pub amplitude: f64,
    pub mode: usize,
}

impl EulerInit {
    pub fn state_at(&self, x: f64, length: f64) -> CellState {
        let s = (2.0 * std::f64::consts::PI * self.mode as f64 * x / length).sin();
        let d = self.amplitude * s;
        CellState {
            n0: self.density * (1.0 + d),
            u: [d, 0.0, 0.0],
            t0: self.temperature * (1.0 + d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EulerState {
    pub t: f64,
    pub conserved: Vec<Cons>,
    pub primitive: Vec<CellState>,
}

/// RK4 with second-order central fluxes and fourth-order dissipation.
#[derive(Debug, Clone)]
pub struct EulerSolver {
    pub grid: SpatialGrid,
    pub closure: Closure,
    pub cfl: f64,
    /// coefficient of `-(ν/h) Δ⁴U`
    pub dissipation: f64,
    pub u_max: f64,
}

impl EulerSolver {
    pub fn new(grid: SpatialGrid, closure: Closure, cfl: f64) -> Self {
        Self {
            grid,
            closure,
            cfl,
            dissipation: 0.01,
            u_max: crate::equilibrium::DEFAULT_U_MAX,
        }
    }

    pub fn initial(&self, init: &EulerInit) -> Result<EulerState, EulerError> {
        let prim: Vec<CellState> = (0..self.grid.cells)
            .map(|i| init.state_at(self.grid.x(i), self.grid.length))
            .collect();
        self.from_primitive(prim, 0.0)
    }

    pub fn from_primitive(&self, prim: Vec<CellState>, t: f64) -> Result<EulerState, EulerError> {
        for s in &prim {
            s.validate(self.u_max)?;
        }
        let conserved = prim
            .iter()
            .map(|s| self.closure.conserved(s))
            .collect::<Result<_, _>>()?;
        Ok(EulerState {
            t,
            conserved,
            primitive: prim,
        })
    }

    pub fn max_dt(&self) -> f64 {
        self.cfl * self.grid.h()
    }

    pub fn recover_all(&self, u: &[Cons], guess: &[CellState]) -> Result<Vec<CellState>, EulerError> {
        u.iter()
            .zip(guess)
            .map(|(c, g)| self.closure.recover(c, Some(g), self.u_max))
            .collect()
    }

    /// `-D_x F(W)` for each cell (no dissipation).
    pub fn flux_divergence(&self, prim: &[CellState]) -> Result<Vec<Cons>, EulerError> {
        let f: Vec<Cons> = prim
            .iter()
            .map(|s| self.closure.flux(s))
            .collect::<Result<_, _>>()?;
        let n = self.grid.cells;
        let mut out = vec![[0.0; 5]; n];
        for a in 0..5 {
            let col: Vec<f64> = f.iter().map(|v| v[a]).collect();
            let d = self.grid.d1(&col);
            for i in 0..n {
                out[i][a] = -d[i];
            }
        }
        Ok(out)
    }

    /// Semi-discrete right-hand side including the dissipation term.
    pub fn rhs(&self, u: &[Cons], prim: &[CellState]) -> Result<Vec<Cons>, EulerError> {
        let mut r = self.flux_divergence(prim)?;
        let n = self.grid.cells;
        let nu = self.dissipation / self.grid.h();
        for a in 0..5 {
            let col: Vec<f64> = u.iter().map(|v| v[a]).collect();
            let d4 = self.grid.delta4(&col);
            for i in 0..n {
                r[i][a] -= nu * d4[i];
            }
        }
        Ok(r)
    }

    pub fn step(&self, state: &EulerState, dt: f64) -> Result<EulerState, EulerError> {
        let limit = self.max_dt();
        if dt > limit * (1.0 + 1e-12) {
            return Err(EulerError::Cfl { dt, limit });
        }
        let n = self.grid.cells;
        let axpy = |u: &[Cons], k: &[Cons], c: f64| -> Vec<Cons> {
            (0..n)
                .map(|i| {
                    let mut v = u[i];
                    for a in 0..5 {
                        v[a] += c * k[i][a];
                    }
                    v
                })
                .collect()
        };
        let u0 = &state.conserved;
        let k1 = self.rhs(u0, &state.primitive)?;
        let u1 = axpy(u0, &k1, 0.5 * dt);
        let p1 = self.recover_all(&u1, &state.primitive)?;
        let k2 = self.rhs(&u1, &p1)?;
        let u2 = axpy(u0, &k2, 0.5 * dt);
        let p2 = self.recover_all(&u2, &p1)?;
        let k3 = self.rhs(&u2, &p2)?;
        let u3 = axpy(u0, &k3, dt);
        let p3 = self.recover_all(&u3, &p2)?;
        let k4 = self.rhs(&u3, &p3)?;
        let conserved: Vec<Cons> = (0..n)
            .map(|i| {
                let mut v = u0[i];
                for a in 0..5 {
                    v[a] += dt / 6.0 * (k1[i][a] + 2.0 * k2[i][a] + 2.0 * k3[i][a] + k4[i][a]);
                }
                v
            })
            .collect();
        if !conserved.iter().flatten().all(|x| x.is_finite()) {
            return Err(EulerError::NonFinite);
        }
        let primitive = self.recover_all(&conserved, &p3)?;
        Ok(EulerState {
            t: state.t + dt,
            conserved,
            primitive,
        })
    }

    /// Discrete totals `Σ_i h U_i`.
    pub fn totals(&self, state: &EulerState) -> Cons {
        let mut t = [0.0; 5];
        for (a, ta) in t.iter_mut().enumerate() {
            let col: Vec<f64> = state.conserved.iter().map(|v| v[a]).collect();
            *ta = self.grid.integrate(&col);
        }
        t
    }

    /// `∂_t W = -(∂U/∂W)^{-1} D_x F(W)`, the Euler equations substituted.
    pub fn time_derivative(&self, prim: &[CellState]) -> Result<Vec<Prim>, EulerError> {
        let div = self.flux_divergence(prim)?;
        prim.iter()
            .zip(div)
            .map(|(s, r)| {
                let j = self.closure.jacobian(s)?;
                let x = j
                    .lu()
                    .solve(&Vector5::from(r))
                    .ok_or_else(|| EulerError::Recovery("singular Jacobian".into()))?;
                Ok([x[0], x[1], x[2], x[3], x[4]])
            })
            .collect()
    }

    /// `∂_t^j W` for `j = 0..=order` (order ≤ 3), each obtained from the Euler
    /// equations by directional differencing of the time-derivative map.
    pub fn time_derivatives(
        &self,
        prim: &[CellState],
        order: usize,
    ) -> Result<Vec<Vec<Prim>>, EulerError> {
        assert!(order <= 3);
        let w0: Vec<Prim> = prim.iter().map(prim_of).collect();
        let mut out = vec![w0.clone()];
        if order == 0 {
            return Ok(out);
        }
        let wt = self.time_derivative(prim)?;
        out.push(wt.clone());
        if order == 1 {
            return Ok(out);
        }
        let delta = 1e-3;
        let shift = |w: &[Prim], d: &[Prim], s: f64| -> Vec<CellState> {
            w.iter()
                .zip(d)
                .map(|(a, b)| {
                    let mut v = *a;
                    for k in 0..5 {
                        v[k] += s * b[k];
                    }
                    state_of(&v)
                })
                .collect()
        };
        let diff = |a: &[Prim], b: &[Prim], s: f64| -> Vec<Prim> {
            a.iter()
                .zip(b)
                .map(|(x, y)| {
                    let mut v = [0.0; 5];
                    for k in 0..5 {
                        v[k] = (x[k] - y[k]) / s;
                    }
                    v
                })
                .collect()
        };
        // second derivative of W along its own flow: D(W_t)[W_t]
        let second = |w: &[Prim], wt: &[Prim]| -> Result<Vec<Prim>, EulerError> {
            let p = self.time_derivative(&shift(w, wt, delta))?;
            let m = self.time_derivative(&shift(w, wt, -delta))?;
            Ok(diff(&p, &m, 2.0 * delta))
        };
        let wtt = second(&w0, &wt)?;
        out.push(wtt.clone());
        if order == 2 {
            return Ok(out);
        }
        let at = |s: f64| -> Result<Vec<Prim>, EulerError> {
            let ws: Vec<Prim> = shift(&w0, &wt, s).iter().map(prim_of).collect();
            let wts = self.time_derivative(&shift(&w0, &wt, s))?;
            second(&ws, &wts)
        };
        let wttt = diff(&at(delta)?, &at(-delta)?, 2.0 * delta);
        out.push(wttt);
        Ok(out)
    }

    pub fn run(
        &self,
        init: &EulerState,
        dt: f64,
        t_final: f64,
    ) -> Result<EulerHistory, EulerError> {
        let steps = (t_final / dt).round() as usize;
        let mut states = vec![init.clone()];
        let mut cur = init.clone();
        for s in 0..steps {
            cur = self.step(&cur, dt)?;
            cur.t = (s + 1) as f64 * dt;
            states.push(cur.clone());
        }
        Ok(EulerHistory { dt, states })
    }
}

/// Uniformly spaced Euler states.
#[derive(Debug, Clone, PartialEq)]
pub struct EulerHistory {
    pub dt: f64,
    pub states: Vec<EulerState>,
}

/// Weights of the Lagrange interpolant through nodes `0..k` at position `s`.
pub fn lagrange_weights(k: usize, s: f64) -> Vec<f64> {
    (0..k)
        .map(|i| {
            (0..k)
                .filter(|&j| j != i)
                .map(|j| (s - j as f64) / (i as f64 - j as f64))
                .product()
        })
        .collect()
}

/// First index and local coordinate of a 4-point stencil around `t` on a
/// uniform grid of `len` samples spaced `dt`.
pub fn stencil4(len: usize, dt: f64, t: f64) -> (usize, f64) {
    let x = t / dt;
    let i = x.floor() as isize;
    let start = (i - 1).clamp(0, len as isize - 4) as usize;
    (start, x - start as f64)
}

impl EulerHistory {
    pub fn t_final(&self) -> f64 {
        self.states.last().map(|s| s.t).unwrap_or(0.0)
    }

    /// Primitive fields at time `t`, cubic Lagrange in time.
    pub fn primitive_at(&self, t: f64) -> Vec<CellState> {
        if self.states.len() < 4 {
            return self.states[0].primitive.clone();
        }
        let (start, s) = stencil4(self.states.len(), self.dt, t);
        let w = lagrange_weights(4, s);
        let n = self.states[0].primitive.len();
        (0..n)
            .map(|i| {
                let mut v = [0.0; 5];
                for (k, wk) in w.iter().enumerate() {
                    let p = prim_of(&self.states[start + k].primitive[i]);
                    for a in 0..5 {
                        v[a] += wk * p[a];
                    }
                }
                state_of(&v)
            })
            .collect()
    }
}

/// Solution-size functionals of the fluid backbone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluidDiagnostics {
    pub z: f64,
    pub zcal: f64,
    pub y_floor: f64,
    pub window_ok: bool,
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `Z`, `𝒵` over the stored history and the window condition
/// `Y(t0)/2 >= Z`, with `Y` built on `temperature`.
pub fn diagnostics_z(
    solver: &EulerSolver,
    history: &[EulerState],
    t0: f64,
    temperature: f64,
) -> Result<FluidDiagnostics, EulerError> {
    let grid = solver.grid;
    let mut z = 0.0f64;
    let mut zcal = 0.0f64;
    for st in history {
        let td = solver.time_derivatives(&st.primitive, 3)?;
        // x-derivatives of each time-derivative field
        let xd = |f: &[Prim], times: usize| -> Vec<Prim> {
            let mut cur: Vec<Prim> = f.to_vec();
            for _ in 0..times {
                let mut next = vec![[0.0; 5]; cur.len()];
                for a in 0..5 {
                    let col: Vec<f64> = cur.iter().map(|v| v[a]).collect();
                    let d = grid.d1(&col);
                    for i in 0..cur.len() {
                        next[i][a] = d[i];
                    }
                }
                cur = next;
            }
            cur
        };
        let sq = |v: &Prim| v.iter().map(|x| x * x).sum::<f64>();
        for l in 1..=3 {
            let mut tot = vec![0.0; grid.cells];
            for j in 0..=l {
                let f = xd(&td[j], l - j);
                let c = binom(l, j);
                for i in 0..grid.cells {
                    tot[i] += c * sq(&f[i]);
                }
            }
            for (i, v) in tot.iter().enumerate() {
                let g = v.sqrt();
                zcal = zcal.max(g);
                if l == 1 {
                    let s = &st.primitive[i];
                    z = z.max(g * (1.0 + s.t0) * s.u0() / (s.t0 * s.t0));
                }
            }
        }
    }
    let y_floor = 0.5 * rate_y(temperature, t0);
    Ok(FluidDiagnostics {
        z,
        zcal,
        y_floor,
        window_ok: y_floor >= z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::bessel_k;
    use crate::phase_space::{build_momentum_grid, MomentumGridConfig};

    fn wave(amp: f64) -> EulerInit {
        EulerInit {
            density: 1.0,
            temperature: 0.2,
            amplitude: amp,
            mode: 1,
        }
    }

    #[test]
    fn closure_examples() {
        let (p, e) = thermo_closure(1.0, 1.0).unwrap();
        assert_eq!(p, 1.0);
        let want = bessel_k(3, 1.0).unwrap() / bessel_k(2, 1.0).unwrap() - 1.0;
        assert!((e - want).abs() < 1e-12);
        let (p2, _) = thermo_closure(2.0, 1.0).unwrap();
        assert_eq!(p2, 2.0 * p);
        assert!(thermo_closure(-1.0, 1.0).is_err());
    }

    #[test]
    fn recovery_round_trip() {
        let rest = CellState::rest(1.3, 0.4);
        let u = Closure::Analytic.conserved(&rest).unwrap();
        let back = Closure::Analytic.recover(&u, None, 0.1).unwrap();
        assert_eq!(back.u, [0.0; 3]);
        assert!((back.n0 - 1.3).abs() < 1e-12 && (back.t0 - 0.4).abs() < 1e-12);
        let s = CellState {
            n0: 0.9,
            u: [0.05, -0.02, 0.01],
            t0: 0.27,
        };
        let u = Closure::Analytic.conserved(&s).unwrap();
        let back = Closure::Analytic.recover(&u, None, 0.1).unwrap();
        let err = (back.n0 - s.n0).abs()
            + (back.t0 - s.t0).abs()
            + (0..3).map(|i| (back.u[i] - s.u[i]).abs()).sum::<f64>();
        assert!(err < 1e-10, "{err}");
        let fast = CellState {
            u: [0.3, 0.0, 0.0],
            ..s
        };
        let u = Closure::Analytic.conserved(&fast).unwrap();
        assert!(matches!(
            Closure::Analytic.recover(&u, None, 0.1),
            Err(EulerError::Equilibrium(EquilibriumError::TooFast { .. }))
        ));
    }

    #[test]
    fn jacobians_match_differences() {
        let g = build_momentum_grid(&MomentumGridConfig {
            radius: 3.5,
            points_per_axis: 12,
        })
        .unwrap();
        let s = CellState {
            n0: 1.1,
            u: [0.03, 0.01, 0.0],
            t0: 0.22,
        };
        for c in [Closure::Analytic, Closure::Lattice(Arc::new(g))] {
            let j = c.jacobian(&s).unwrap();
            let w = prim_of(&s);
            for b in 0..5 {
                let d = 1e-6;
                let mut wp = w;
                let mut wm = w;
                wp[b] += d;
                wm[b] -= d;
                let up = c.conserved(&state_of(&wp)).unwrap();
                let um = c.conserved(&state_of(&wm)).unwrap();
                for a in 0..5 {
                    let fd = (up[a] - um[a]) / (2.0 * d);
                    assert!((fd - j[(a, b)]).abs() < 1e-6 * (1.0 + fd.abs()), "{a}{b}");
                }
            }
            let u = c.conserved(&s).unwrap();
            let back = c.recover(&u, None, 0.1).unwrap();
            assert!((back.t0 - s.t0).abs() < 1e-10 && (back.u[0] - s.u[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_state_is_steady_and_totals_conserved() {
        let grid = SpatialGrid::new(16, 2.0 * std::f64::consts::PI).unwrap();
        let solver = EulerSolver::new(grid, Closure::Analytic, 0.4);
        let st = solver.initial(&wave(0.0)).unwrap();
        let next = solver.step(&st, 0.1).unwrap();
        for (a, b) in st.conserved.iter().zip(&next.conserved) {
            for k in 0..5 {
                assert!((a[k] - b[k]).abs() <= 1e-15 * a[k].abs().max(1.0));
            }
        }
        let st = solver.initial(&wave(1e-3)).unwrap();
        let t0 = solver.totals(&st);
        let next = solver.step(&st, 0.1).unwrap();
        let t1 = solver.totals(&next);
        for k in [0, 1, 4] {
            assert!((t0[k] - t1[k]).abs() <= 1e-12 * t0[k].abs().max(t0[0].abs()));
        }
        assert!(matches!(solver.step(&st, 1.0), Err(EulerError::Cfl { .. })));
    }

    #[test]
    fn substituted_time_derivative_matches_history() {
        let grid = SpatialGrid::new(32, 2.0 * std::f64::consts::PI).unwrap();
        let mut solver = EulerSolver::new(grid, Closure::Analytic, 0.4);
        solver.dissipation = 0.0;
        let st = solver.initial(&wave(1e-3)).unwrap();
        let wt = solver.time_derivative(&st.primitive).unwrap();
        let mut errs = Vec::new();
        for dt in [0.02, 0.01] {
            let a = solver.step(&st, dt).unwrap();
            let mut b = st.clone();
            // backward step by negating the time step
            b = {
                let mut s = solver.clone();
                s.cfl = 1.0;
                s.step(&b, -dt).unwrap()
            };
            let mut e = 0.0f64;
            for i in 0..32 {
                let pa = prim_of(&a.primitive[i]);
                let pb = prim_of(&b.primitive[i]);
                for k in 0..5 {
                    e = e.max(((pa[k] - pb[k]) / (2.0 * dt) - wt[i][k]).abs());
                }
            }
            errs.push(e);
        }
        assert!(errs[0] / errs[1] > 3.5, "{errs:?}");
    }

    #[test]
    fn diagnostics_for_constant_and_wave() {
        let grid = SpatialGrid::new(16, 2.0 * std::f64::consts::PI).unwrap();
        let solver = EulerSolver::new(grid, Closure::Analytic, 0.4);
        let st = solver.initial(&wave(0.0)).unwrap();
        let d = diagnostics_z(&solver, &[st], 1.0, 0.21).unwrap();
        assert_eq!(d.z, 0.0);
        assert_eq!(d.zcal, 0.0);
        assert!(d.window_ok);
        let st = solver.initial(&wave(1e-3)).unwrap();
        let hist = solver.run(&st, 0.1, 0.5).unwrap();
        let d = diagnostics_z(&solver, &hist.states, 1.0, 0.21).unwrap();
        assert!(d.z > 0.0 && d.z < 0.1, "{d:?}");
        assert!(d.zcal < 1e-2);
        assert!(d.window_ok, "{d:?}");
    }

    #[test]
    fn interpolation_is_cubic_exact() {
        let w = lagrange_weights(4, 1.3);
        let f = |x: f64| 1.0 + x - 2.0 * x * x + 0.5 * x * x * x;
        let v: f64 = (0..4).map(|i| w[i] * f(i as f64)).sum();
        assert!((v - f(1.3)).abs() < 1e-13);
        assert_eq!(stencil4(10, 0.1, 0.05).0, 0);
        assert_eq!(stencil4(10, 0.1, 0.55).0, 4);
        assert_eq!(stencil4(10, 0.1, 0.9).0, 6);
    }
}
