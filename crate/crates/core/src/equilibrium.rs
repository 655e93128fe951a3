//! Jüttner equilibria, the modified Bessel functions that normalise them, and
//! the fluid moments they carry.

use crate::phase_space::{dot3, energy_of, MomentumGrid};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EquilibriumError {
    #[error("Bessel argument must be positive, got {0}")]
    BadArgument(f64),
    #[error("unsupported Bessel order {0}")]
    BadOrder(u32),
    #[error("non-physical fluid state: n0={n0}, T0={t0}")]
    NonPhysical { n0: f64, t0: f64 },
    #[error("bulk velocity |u|={speed} exceeds u_max={u_max}")]
    TooFast { speed: f64, u_max: f64 },
}

/// Default bound on |u| for the small-velocity regime.
pub const DEFAULT_U_MAX: f64 = 0.1;

/// `int_0^inf exp(-z t) (t (t+2))^{power} dt`, i.e. the Bessel integral with
/// the factor `exp(-z)` removed (s = 1 + t).
fn shifted_integral(z: f64, power: f64) -> f64 {
    let f = |t: f64| (-z * t).exp() * (t * (t + 2.0)).powf(power);
    // beyond this the integrand is below 1e-25 of its peak
    let upper = (60.0 + 8.0 * power) / z + 4.0;
    let rough = quadrature::double_exponential::integrate(f, 0.0, upper, 1e-6).integral;
    let tol = (rough.abs() * 1e-15).max(1e-300);
    quadrature::double_exponential::integrate(f, 0.0, upper, tol).integral
}

/// `K_nu(z) * exp(z)` for nu in {1, 2, 3}; avoids underflow at large z.
pub fn bessel_k_scaled(order: u32, z: f64) -> Result<f64, EquilibriumError> {
    if !(z > 0.0) || !z.is_finite() {
        return Err(EquilibriumError::BadArgument(z));
    }
    let k1 = || z * shifted_integral(z, 0.5);
    let k2 = || z * z / 3.0 * shifted_integral(z, 1.5);
    match order {
        1 => Ok(k1()),
        2 => Ok(k2()),
        3 => Ok(k1() + 4.0 * k2() / z),
        o => Err(EquilibriumError::BadOrder(o)),
    }
}

/// Modified Bessel function of the second kind, orders 1..=3.
///
/// K2 and K1 come from their integral representations over s in [1, inf);
/// K3 from the recurrence K3 = K1 + 4 K2 / z.
pub fn bessel_k(order: u32, z: f64) -> Result<f64, EquilibriumError> {
    Ok(bessel_k_scaled(order, z)? * (-z).exp())
}

/// Scaled K1, K2, K3 at one argument, sharing the quadratures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BesselTriple {
    pub z: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

impl BesselTriple {
    /// Values are scaled by exp(z); only ratios are used downstream.
    pub fn new(z: f64) -> Result<Self, EquilibriumError> {
        let k1 = bessel_k_scaled(1, z)?;
        let k2 = bessel_k_scaled(2, z)?;
        Ok(Self {
            z,
            k1,
            k2,
            k3: k1 + 4.0 * k2 / z,
        })
    }

    /// Enthalpy per particle (e0 + P0) / n0 = K3 / K2.
    pub fn enthalpy(&self) -> f64 {
        self.k3 / self.k2
    }

    /// d(K3/K2)/dz from K_nu' = -K_{nu-1} - (nu/z) K_nu.
    pub fn enthalpy_dz(&self) -> f64 {
        let z = self.z;
        let k3p = -self.k2 - 3.0 * self.k3 / z;
        let k2p = -self.k1 - 2.0 * self.k2 / z;
        (k3p * self.k2 - self.k3 * k2p) / (self.k2 * self.k2)
    }
}

/// Pressure and energy density of a Jüttner gas: P0 = n0 T0,
/// e0 = n0 (K3/K2 - T0).
pub fn thermo_closure(n0: f64, t0: f64) -> Result<(f64, f64), EquilibriumError> {
    if !(n0 > 0.0) || !(t0 > 0.0) {
        return Err(EquilibriumError::NonPhysical { n0, t0 });
    }
    let b = BesselTriple::new(1.0 / t0)?;
    Ok((n0 * t0, n0 * (b.enthalpy() - t0)))
}

/// Fluid variables at one spatial cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellState {
    pub n0: f64,
    pub u: [f64; 3],
    pub t0: f64,
}

impl CellState {
    pub fn rest(n0: f64, t0: f64) -> Self {
        Self {
            n0,
            u: [0.0; 3],
            t0,
        }
    }

    pub fn gamma(&self) -> f64 {
        1.0 / self.t0
    }

    pub fn u0(&self) -> f64 {
        energy_of(self.u)
    }

    pub fn speed(&self) -> f64 {
        dot3(self.u, self.u).sqrt()
    }

    pub fn validate(&self, u_max: f64) -> Result<(), EquilibriumError> {
        if !(self.n0 > 0.0) || !(self.t0 > 0.0) || !self.n0.is_finite() || !self.t0.is_finite() {
            return Err(EquilibriumError::NonPhysical {
                n0: self.n0,
                t0: self.t0,
            });
        }
        let s = self.speed();
        if !(s <= u_max) {
            return Err(EquilibriumError::TooFast { speed: s, u_max });
        }
        Ok(())
    }

    /// Whether T0 lies in the range the default momentum box resolves.
    pub fn temperature_supported(&self) -> bool {
        (0.1..=1.2).contains(&self.t0)
    }
}

/// Fluid fields on the spatial grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FluidState {
    pub cells: Vec<CellState>,
}

impl FluidState {
    pub fn uniform(cells: usize, state: CellState) -> Self {
        Self {
            cells: vec![state; cells],
        }
    }

    pub fn validate(&self, u_max: f64) -> Result<(), EquilibriumError> {
        self.cells.iter().try_for_each(|c| c.validate(u_max))
    }

    pub fn max_temperature(&self) -> f64 {
        self.cells.iter().map(|c| c.t0).fold(0.0, f64::max)
    }
}

/// Jüttner distribution of one cell with its Bessel normalisation cached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Juttner {
    pub state: CellState,
    pub gamma: f64,
    pub u0: f64,
    pub bessel: BesselTriple,
    /// log of n0 gamma / (4 pi K2(gamma))
    pub log_norm: f64,
}

impl Juttner {
    pub fn new(state: CellState) -> Result<Self, EquilibriumError> {
        state.validate(f64::INFINITY)?;
        let gamma = state.gamma();
        let bessel = BesselTriple::new(gamma)?;
        // K2 = k2_scaled * exp(-gamma)
        let log_norm = (state.n0 * gamma / (4.0 * std::f64::consts::PI * bessel.k2)).ln() + gamma;
        Ok(Self {
            state,
            gamma,
            u0: state.u0(),
            bessel,
            log_norm,
        })
    }

    /// gamma * p^mu u_mu
    #[inline]
    pub fn exponent(&self, p: [f64; 3]) -> f64 {
        self.gamma * (-energy_of(p) * self.u0 + dot3(p, self.state.u))
    }

    pub fn log_value(&self, p: [f64; 3]) -> f64 {
        self.log_norm + self.exponent(p)
    }

    pub fn value(&self, p: [f64; 3]) -> f64 {
        self.log_value(p).exp()
    }

    pub fn sqrt_value(&self, p: [f64; 3]) -> f64 {
        (0.5 * self.log_value(p)).exp()
    }

    /// (u0 p_hat - u) / T0, i.e. -grad_p log M.
    pub fn drift(&self, p: [f64; 3]) -> [f64; 3] {
        let e = energy_of(p);
        let g = self.gamma;
        let u = self.state.u;
        [
            g * (self.u0 * p[0] / e - u[0]),
            g * (self.u0 * p[1] / e - u[1]),
            g * (self.u0 * p[2] / e - u[2]),
        ]
    }

    pub fn pressure(&self) -> f64 {
        self.state.n0 * self.state.t0
    }

    pub fn energy_density(&self) -> f64 {
        self.state.n0 * (self.bessel.enthalpy() - self.state.t0)
    }

    /// Same energy density through the K1 form n0 (K1/K2 + 3 T0).
    pub fn energy_density_k1(&self) -> f64 {
        self.state.n0 * (self.bessel.k1 / self.bessel.k2 + 3.0 * self.state.t0)
    }

    pub fn on_grid(&self, grid: &MomentumGrid) -> Vec<f64> {
        grid.nodes.iter().map(|&p| self.value(p)).collect()
    }
}

pub fn juttner(state: &CellState, p: [f64; 3]) -> Result<f64, EquilibriumError> {
    Ok(Juttner::new(*state)?.value(p))
}

pub fn juttner_sqrt(state: &CellState, p: [f64; 3]) -> Result<f64, EquilibriumError> {
    Ok(Juttner::new(*state)?.sqrt_value(p))
}

/// Relative discrepancies between quadrature moments of M and the closed
/// forms N^0 = n0 u0, T^ij = (e0+P0) u_i u_j + P0 delta_ij,
/// T^00 = (e0+P0) u0^2 - P0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentResiduals {
    pub density: f64,
    pub pressure: f64,
    pub energy: f64,
}

pub fn fluid_moment_check(
    state: &CellState,
    grid: &MomentumGrid,
) -> Result<MomentResiduals, EquilibriumError> {
    let j = Juttner::new(*state)?;
    let m = j.on_grid(grid);
    let n = grid.len();
    let mut stress = [[0.0; 3]; 3];
    for (a, row) in stress.iter_mut().enumerate() {
        for (b, entry) in row.iter_mut().enumerate() {
            let v: Vec<f64> = (0..n)
                .map(|k| grid.nodes[k][a] * grid.nodes[k][b] / grid.p0[k] * m[k])
                .collect();
            *entry = grid.integrate(&v);
        }
    }
    let en: Vec<f64> = (0..n).map(|k| grid.p0[k] * m[k]).collect();
    let n0 = grid.integrate(&m);
    let e = j.energy_density();
    let p = j.pressure();
    let u = state.u;
    let mut pres = 0.0f64;
    for a in 0..3 {
        for b in 0..3 {
            let exact = (e + p) * u[a] * u[b] + if a == b { p } else { 0.0 };
            pres = pres.max((stress[a][b] - exact).abs() / p);
        }
    }
    let t00 = (e + p) * j.u0 * j.u0 - p;
    Ok(MomentResiduals {
        density: (n0 - state.n0 * j.u0).abs() / (state.n0 * j.u0),
        pressure: pres,
        energy: (grid.integrate(&en) - t00).abs() / t00,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase_space::{build_momentum_grid, MomentumGridConfig};

    /// Independent oracle: composite Gauss-Legendre on s = 1 + x^2 (removes
    /// the square-root endpoint behaviour) over a truncated range.
    fn oracle_k(nu: u32, z: f64) -> f64 {
        let (c, pw) = match nu {
            1 => (z, 0.5),
            2 => (z * z / 3.0, 1.5),
            _ => unreachable!(),
        };
        // 5-point Gauss-Legendre
        let xg = [
            0.0,
            0.538_469_310_105_683_1,
            -0.538_469_310_105_683_1,
            0.906_179_845_938_664,
            -0.906_179_845_938_664,
        ];
        let wg = [
            0.568_888_888_888_888_9,
            0.478_628_670_499_366_5,
            0.478_628_670_499_366_5,
            0.236_926_885_056_189_1,
            0.236_926_885_056_189_1,
        ];
        let xmax = ((70.0 / z) + 2.0f64).sqrt();
        let panels = 4000;
        let hh = xmax / panels as f64;
        let mut s = 0.0;
        for i in 0..panels {
            let mid = (i as f64 + 0.5) * hh;
            for (x, w) in xg.iter().zip(wg) {
                let x = mid + 0.5 * hh * x;
                let t = x * x;
                s += w * 0.5 * hh * 2.0 * x * (-z * (1.0 + t)).exp() * (t * (t + 2.0)).powf(pw);
            }
        }
        c * s
    }

    #[test]
    fn k2_at_one_matches_table_and_oracle() {
        let k = bessel_k(2, 1.0).unwrap();
        assert!((k - 1.624_838_898_635_177).abs() < 1e-12);
        assert!((k - oracle_k(2, 1.0)).abs() / k < 1e-10);
        let k1 = bessel_k(1, 1.0).unwrap();
        assert!((k1 - 0.601_907_230_197_234_6).abs() < 1e-12);
    }

    #[test]
    fn oracle_agreement_over_gamma_range() {
        for &z in &[0.5, 0.83, 2.0, 5.0, 10.0] {
            for nu in [1, 2] {
                let k = bessel_k(nu, z).unwrap();
                let o = oracle_k(nu, z);
                assert!((k - o).abs() / o < 1e-10, "nu={nu} z={z} {k} {o}");
            }
        }
    }

    #[test]
    fn large_argument_asymptotics() {
        // K2(z) e^z sqrt(2z/pi) = 1 + 15/(8z) + 105/(128 z^2) + ...
        for &z in &[50.0, 200.0] {
            let r = bessel_k_scaled(2, z).unwrap() * (2.0 * z / std::f64::consts::PI).sqrt();
            let series = 1.0 + 15.0 / (8.0 * z) + 105.0 / (128.0 * z * z);
            assert!((r - series).abs() < 5.0 / (z * z * z), "z={z} r={r}");
        }
    }

    #[test]
    fn recurrence_and_energy_forms() {
        for i in 0..20 {
            let z = 0.5 + 9.5 * i as f64 / 19.0;
            let k1 = bessel_k(1, z).unwrap();
            let k2 = bessel_k(2, z).unwrap();
            let k3 = bessel_k(3, z).unwrap();
            assert!((k3 - k1 - 4.0 * k2 / z).abs() <= 1e-9 * k3);
            let j = Juttner::new(CellState::rest(1.3, 1.0 / z)).unwrap();
            let a = j.energy_density();
            let b = j.energy_density_k1();
            assert!((a - b).abs() <= 1e-12 * a, "z={z}");
        }
        assert_eq!(bessel_k(2, 0.0), Err(EquilibriumError::BadArgument(0.0)));
        assert_eq!(bessel_k(4, 1.0), Err(EquilibriumError::BadOrder(4)));
    }

    #[test]
    fn enthalpy_derivative_matches_difference() {
        let z = 3.0;
        let d = 1e-5;
        let fd = (BesselTriple::new(z + d).unwrap().enthalpy()
            - BesselTriple::new(z - d).unwrap().enthalpy())
            / (2.0 * d);
        let an = BesselTriple::new(z).unwrap().enthalpy_dz();
        assert!((fd - an).abs() < 1e-8 * an.abs());
    }

    #[test]
    fn closure_examples() {
        let (p, e) = thermo_closure(1.0, 1.0).unwrap();
        assert_eq!(p, 1.0);
        let k3 = bessel_k(3, 1.0).unwrap();
        let k2 = bessel_k(2, 1.0).unwrap();
        assert!((e - (k3 / k2 - 1.0)).abs() < 1e-12);
        let (p2, _) = thermo_closure(2.0, 1.0).unwrap();
        assert_eq!(p2, 2.0);
        assert!(thermo_closure(-1.0, 1.0).is_err());
    }

    #[test]
    fn juttner_rest_frame_and_sqrt() {
        let s = CellState::rest(1.2, 0.5);
        let j = Juttner::new(s).unwrap();
        let g = 2.0;
        let pref = 1.2 * g / (4.0 * std::f64::consts::PI * bessel_k(2, g).unwrap());
        let p = [0.3, -0.4, 1.0];
        let exact = pref * (-g * energy_of(p)).exp();
        assert!((j.value(p) - exact).abs() < 1e-14 * exact);
        let r = j.sqrt_value(p);
        assert!((r * r - j.value(p)).abs() <= 1e-15 * j.value(p) * 2.0);
        assert!((j.sqrt_value([0.0; 3]) - (pref.sqrt() * (-g / 2.0).exp())).abs() < 1e-14);
        assert!(j.value([0.0, 0.0, 1.0]) > j.value([0.0, 0.0, 2.0]));
    }

    #[test]
    fn rotation_invariance() {
        let s = CellState {
            n0: 1.0,
            u: [0.05, -0.02, 0.01],
            t0: 0.3,
        };
        let r = CellState {
            u: [s.u[1], s.u[2], s.u[0]],
            ..s
        };
        let a = Juttner::new(s).unwrap();
        let b = Juttner::new(r).unwrap();
        let p = [0.4, 1.1, -0.7];
        let q = [p[1], p[2], p[0]];
        assert!((a.value(p) - b.value(q)).abs() < 1e-14 * a.value(p));
    }

    #[test]
    fn moments_on_fine_grid() {
        let grid = build_momentum_grid(&MomentumGridConfig {
            radius: 5.0,
            points_per_axis: 32,
        })
        .unwrap();
        let r = fluid_moment_check(&CellState::rest(1.0, 0.2), &grid).unwrap();
        assert!(r.density < 1e-6, "{r:?}");
        assert!(r.pressure < 1e-5, "{r:?}");
        assert!(r.energy < 1e-5, "{r:?}");
        let moving = CellState {
            n0: 1.0,
            u: [0.08, 0.0, 0.0],
            t0: 0.2,
        };
        let r = fluid_moment_check(&moving, &grid).unwrap();
        assert!(r.density < 1e-5 && r.pressure < 1e-4 && r.energy < 1e-5, "{r:?}");
    }

    #[test]
    fn velocity_guard() {
        let s = CellState {
            n0: 1.0,
            u: [0.2, 0.0, 0.0],
            t0: 0.3,
        };
        assert!(matches!(
            s.validate(DEFAULT_U_MAX),
            Err(EquilibriumError::TooFast { .. })
        ));
    }
}
