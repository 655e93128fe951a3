//! Relativistic kinematics and the discrete momentum / space grids.
//!
//! Units are c = m = 1. The momentum lattice is a uniform cell-centred grid on
//! the box [-R, R]^3 with equal midpoint weights; the node set is symmetric
//! under p -> -p. The lattice also owns the discrete momentum gradient used by
//! the collision module and its exact adjoint.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("points per axis must be even and >= 8, got {0}")]
    BadAxisCount(usize),
    #[error("momentum radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("spatial grid needs at least 4 cells and positive length (cells={0}, length={1})")]
    BadSpace(usize, f64),
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
}

/// Particle energy sqrt(1 + |p|^2).
#[inline]
pub fn energy_of(p: [f64; 3]) -> f64 {
    (1.0 + p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

#[inline]
pub fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// An on-shell momentum; p0 is always recomputed from p.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Momentum {
    pub p: [f64; 3],
}

impl Momentum {
    pub fn new(p: [f64; 3]) -> Self {
        Self { p }
    }

    pub fn p0(&self) -> f64 {
        energy_of(self.p)
    }
}

/// Minkowski product with signature (-,+,+,+): -p0 q0 + p.q
///
/// Evaluated as `-1 - (|p-q|^2 - (p0-q0)^2) / 2`, which is exact on the shell
/// for `p = q` and free of cancellation for nearby momenta.
pub fn lorentz_inner(p: Momentum, q: Momentum) -> f64 {
    let (a, b) = (p.p0(), q.p0());
    let d = [p.p[0] - q.p[0], p.p[1] - q.p[1], p.p[2] - q.p[2]];
    let de = (dot3(p.p, p.p) - dot3(q.p, q.p)) / (a + b);
    -1.0 - 0.5 * (dot3(d, d) - de * de)
}

/// Relativistic velocity p / p0.
pub fn p_hat(p: Momentum) -> [f64; 3] {
    let e = p.p0();
    [p.p[0] / e, p.p[1] / e, p.p[2] / e]
}

/// Fixed-order pairwise summation; bit-reproducible for a given slice.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if v.len() <= BLOCK {
        let mut s = 0.0;
        for x in v {
            s += x;
        }
        s
    } else {
        let mid = v.len() / 2;
        pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentumGridConfig {
    pub radius: f64,
    pub points_per_axis: usize,
}

impl Default for MomentumGridConfig {
    fn default() -> Self {
        Self {
            radius: 8.0,
            points_per_axis: 16,
        }
    }
}

/// Tensor-product momentum lattice.
///
/// Node `k` has axis indices `(i, j, l)` with `k = (i * n + j) * n + l`.
/// `|p_i| <= R` holds componentwise (the box, not the ball).
#[derive(Debug, Clone)]
pub struct MomentumGrid {
    pub radius: f64,
    pub n: usize,
    pub h: f64,
    pub axis: Vec<f64>,
    pub nodes: Vec<[f64; 3]>,
    pub p0: Vec<f64>,
    pub weight: f64,
}

pub fn build_momentum_grid(cfg: &MomentumGridConfig) -> Result<MomentumGrid, GridError> {
    if !(cfg.radius > 0.0) || !cfg.radius.is_finite() {
        return Err(GridError::BadRadius(cfg.radius));
    }
    let n = cfg.points_per_axis;
    if n < 8 || !n.is_multiple_of(2) {
        return Err(GridError::BadAxisCount(n));
    }
    let h = 2.0 * cfg.radius / n as f64;
    // symmetric by construction: axis[n-1-i] == -axis[i] exactly
    let half: Vec<f64> = (0..n / 2).map(|i| (i as f64 + 0.5) * h).collect();
    let mut axis = Vec::with_capacity(n);
    for i in (0..n / 2).rev() {
        axis.push(-half[i]);
    }
    axis.extend_from_slice(&half);
    let mut nodes = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for l in 0..n {
                nodes.push([axis[i], axis[j], axis[l]]);
            }
        }
    }
    let p0 = nodes.iter().map(|&p| energy_of(p)).collect();
    Ok(MomentumGrid {
        radius: cfg.radius,
        n,
        h,
        axis,
        nodes,
        p0,
        weight: h * h * h,
    })
}

impl MomentumGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn momentum(&self, k: usize) -> Momentum {
        Momentum::new(self.nodes[k])
    }

    pub fn p_hat(&self, k: usize) -> [f64; 3] {
        let p = self.nodes[k];
        let e = self.p0[k];
        [p[0] / e, p[1] / e, p[2] / e]
    }

    /// Quadrature weight of node `k` (uniform midpoint rule).
    pub fn weight_of(&self, _k: usize) -> f64 {
        self.weight
    }

    pub fn weights(&self) -> Vec<f64> {
        vec![self.weight; self.len()]
    }

    /// Index of the node mirrored through the origin.
    pub fn mirror(&self, k: usize) -> usize {
        self.len() - 1 - k
    }

    /// Weighted sum; panics on length mismatch (see [`integrate_p`]).
    pub fn integrate(&self, values: &[f64]) -> f64 {
        assert_eq!(values.len(), self.len(), "integrand length");
        self.weight * pairwise_sum(values)
    }

    /// `sum_k w f_k g_k`
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        assert_eq!(f.len(), g.len());
        let prod: Vec<f64> = f.iter().zip(g).map(|(a, b)| a * b).collect();
        self.integrate(&prod)
    }

    pub fn norm(&self, f: &[f64]) -> f64 {
        self.inner(f, f).sqrt()
    }

    /// Stable hash of the geometry, used to key kernel-table caches.
    pub fn geometry_key(&self) -> String {
        format!("n{}_r{:016x}", self.n, self.radius.to_bits())
    }

    /// Discrete gradient: central differences inside, second-order one-sided
    /// closure on the box faces.
    pub fn grad(&self, f: &[f64], out: &mut [[f64; 3]]) {
        assert_eq!(f.len(), self.len());
        assert_eq!(out.len(), self.len());
        let n = self.n;
        let strides = [n * n, n, 1];
        let inv = 1.0 / (2.0 * self.h);
        for k in 0..self.len() {
            let idx = [k / (n * n), (k / n) % n, k % n];
            for a in 0..3 {
                let s = strides[a];
                let i = idx[a];
                out[k][a] = if i == 0 {
                    (-3.0 * f[k] + 4.0 * f[k + s] - f[k + 2 * s]) * inv
                } else if i == n - 1 {
                    (3.0 * f[k] - 4.0 * f[k - s] + f[k - 2 * s]) * inv
                } else {
                    (f[k + s] - f[k - s]) * inv
                };
            }
        }
    }

    pub fn grad_vec(&self, f: &[f64]) -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; self.len()];
        self.grad(f, &mut out);
        out
    }

    /// Transpose of [`MomentumGrid::grad`] (summation by parts with equal
    /// weights). `sum_k out_k f_k == sum_k v_k . (D f)_k` exactly up to rounding.
    pub fn grad_adjoint(&self, v: &[[f64; 3]], out: &mut [f64]) {
        assert_eq!(v.len(), self.len());
        assert_eq!(out.len(), self.len());
        out.iter_mut().for_each(|o| *o = 0.0);
        let n = self.n;
        let strides = [n * n, n, 1];
        let inv = 1.0 / (2.0 * self.h);
        for k in 0..self.len() {
            let idx = [k / (n * n), (k / n) % n, k % n];
            for a in 0..3 {
                let s = strides[a];
                let i = idx[a];
                let c = v[k][a] * inv;
                if i == 0 {
                    out[k] -= 3.0 * c;
                    out[k + s] += 4.0 * c;
                    out[k + 2 * s] -= c;
                } else if i == n - 1 {
                    out[k] += 3.0 * c;
                    out[k - s] -= 4.0 * c;
                    out[k - 2 * s] += c;
                } else {
                    out[k + s] += c;
                    out[k - s] -= c;
                }
            }
        }
    }

    /// Forward-difference gradient `D+`, closed by a backward difference on
    /// the upper face of each axis. Exact on affine functions.
    pub fn grad_fwd(&self, f: &[f64], out: &mut [[f64; 3]]) {
        assert_eq!(f.len(), self.len());
        assert_eq!(out.len(), self.len());
        let n = self.n;
        let strides = [n * n, n, 1];
        let inv = 1.0 / self.h;
        for k in 0..self.len() {
            let idx = [k / (n * n), (k / n) % n, k % n];
            for a in 0..3 {
                let s = strides[a];
                out[k][a] = if idx[a] == n - 1 {
                    (f[k] - f[k - s]) * inv
                } else {
                    (f[k + s] - f[k]) * inv
                };
            }
        }
    }

    pub fn grad_fwd_vec(&self, f: &[f64]) -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; self.len()];
        self.grad_fwd(f, &mut out);
        out
    }

    /// Transpose of [`MomentumGrid::grad_fwd`].
    pub fn grad_fwd_adjoint(&self, v: &[[f64; 3]], out: &mut [f64]) {
        assert_eq!(v.len(), self.len());
        assert_eq!(out.len(), self.len());
        out.iter_mut().for_each(|o| *o = 0.0);
        let n = self.n;
        let strides = [n * n, n, 1];
        let inv = 1.0 / self.h;
        for k in 0..self.len() {
            let idx = [k / (n * n), (k / n) % n, k % n];
            for a in 0..3 {
                let s = strides[a];
                let c = v[k][a] * inv;
                if idx[a] == n - 1 {
                    out[k] += c;
                    out[k - s] -= c;
                } else {
                    out[k + s] += c;
                    out[k] -= c;
                }
            }
        }
    }

    /// `-D+^T v`
    pub fn div_fwd(&self, v: &[[f64; 3]]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.grad_fwd_adjoint(v, &mut out);
        out.iter_mut().for_each(|o| *o = -*o);
        out
    }

    /// Values reindexed through the origin, `(R f)_k = f_{mirror(k)}`.
    pub fn mirrored<T: Copy>(&self, f: &[T]) -> Vec<T> {
        f.iter().rev().copied().collect()
    }

    /// Discrete divergence -D^T v, the negative adjoint of the gradient.
    pub fn div(&self, v: &[[f64; 3]]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.grad_adjoint(v, &mut out);
        out.iter_mut().for_each(|o| *o = -*o);
        out
    }
}

/// Weighted sum with a length check.
pub fn integrate_p(values: &[f64], grid: &MomentumGrid) -> Result<f64, GridError> {
    if values.len() != grid.len() {
        return Err(GridError::Length {
            expected: grid.len(),
            got: values.len(),
        });
    }
    Ok(grid.integrate(values))
}

/// Uniform periodic grid on [0, L) in x1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialGrid {
    pub cells: usize,
    pub length: f64,
}

impl SpatialGrid {
    pub fn new(cells: usize, length: f64) -> Result<Self, GridError> {
        if cells < 4 || !(length > 0.0) {
            return Err(GridError::BadSpace(cells, length));
        }
        Ok(Self { cells, length })
    }

    pub fn h(&self) -> f64 {
        self.length / self.cells as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.h()
    }

    #[inline]
    pub fn wrap(&self, i: isize) -> usize {
        i.rem_euclid(self.cells as isize) as usize
    }

    /// Second-order central first derivative of a periodic sequence.
    pub fn d1(&self, f: &[f64]) -> Vec<f64> {
        let n = self.cells;
        let inv = 1.0 / (2.0 * self.h());
        (0..n)
            .map(|i| (f[(i + 1) % n] - f[(i + n - 1) % n]) * inv)
            .collect()
    }

    /// Second-order central second derivative.
    pub fn d2(&self, f: &[f64]) -> Vec<f64> {
        let n = self.cells;
        let inv = 1.0 / (self.h() * self.h());
        (0..n)
            .map(|i| (f[(i + 1) % n] - 2.0 * f[i] + f[(i + n - 1) % n]) * inv)
            .collect()
    }

    /// Undivided fourth difference (used for hyperdissipation).
    pub fn delta4(&self, f: &[f64]) -> Vec<f64> {
        let n = self.cells;
        (0..n)
            .map(|i| {
                f[(i + 2) % n] - 4.0 * f[(i + 1) % n] + 6.0 * f[i] - 4.0 * f[(i + n - 1) % n]
                    + f[(i + n - 2) % n]
            })
            .collect()
    }

    pub fn integrate(&self, f: &[f64]) -> f64 {
        self.h() * pairwise_sum(f)
    }
}

/// Values over (x-cell, p-node), cell-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DistField {
    pub cells: usize,
    pub nodes: usize,
    pub data: Vec<f64>,
}

impl DistField {
    pub fn zeros(cells: usize, nodes: usize) -> Self {
        Self {
            cells,
            nodes,
            data: vec![0.0; cells * nodes],
        }
    }

    pub fn from_cells(rows: Vec<Vec<f64>>) -> Self {
        let cells = rows.len();
        let nodes = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == nodes));
        Self {
            cells,
            nodes,
            data: rows.concat(),
        }
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.data[i * self.nodes..(i + 1) * self.nodes]
    }

    pub fn cell_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.nodes..(i + 1) * self.nodes]
    }

    pub fn rows(&self) -> Vec<&[f64]> {
        self.data.chunks(self.nodes.max(1)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn matches(&self, space: &SpatialGrid, grid: &MomentumGrid) -> bool {
        self.cells == space.cells && self.nodes == grid.len()
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &DistField) {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(x, y)| *x += a * y);
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            data: self.data.iter().map(|x| a * x).collect(),
            ..*self
        }
    }

    /// Central x1 derivative on the periodic axis.
    pub fn dx(&self, space: &SpatialGrid) -> Self {
        let n = self.cells;
        let inv = 1.0 / (2.0 * space.h());
        let mut out = Self::zeros(n, self.nodes);
        for i in 0..n {
            let a = self.cell((i + 1) % n);
            let b = self.cell((i + n - 1) % n);
            for (o, (x, y)) in out.cell_mut(i).iter_mut().zip(a.iter().zip(b)) {
                *o = (x - y) * inv;
            }
        }
        out
    }

    /// Central second x1 derivative.
    pub fn dxx(&self, space: &SpatialGrid) -> Self {
        let n = self.cells;
        let inv = 1.0 / (space.h() * space.h());
        let mut out = Self::zeros(n, self.nodes);
        for i in 0..n {
            let a = self.cell((i + 1) % n);
            let b = self.cell((i + n - 1) % n);
            let c = self.cell(i);
            for (k, o) in out.cell_mut(i).iter_mut().enumerate() {
                *o = (a[k] - 2.0 * c[k] + b[k]) * inv;
            }
        }
        out
    }

    /// `∬ f² dp dx`
    pub fn l2_sq(&self, space: &SpatialGrid, grid: &MomentumGrid) -> f64 {
        let per: Vec<f64> = (0..self.cells)
            .map(|i| {
                let c = self.cell(i);
                grid.inner(c, c)
            })
            .collect();
        space.integrate(&per)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_gradient_is_exact_on_affine_and_adjoint() {
        let g = build_momentum_grid(&MomentumGridConfig {
            radius: 2.0,
            points_per_axis: 8,
        })
        .unwrap();
        let f: Vec<f64> = g.nodes.iter().map(|p| 1.0 + 2.0 * p[0] - p[1] + 0.5 * p[2]).collect();
        for d in g.grad_fwd_vec(&f) {
            assert!((d[0] - 2.0).abs() < 1e-12 && (d[1] + 1.0).abs() < 1e-12 && (d[2] - 0.5).abs() < 1e-12);
        }
        let q: Vec<f64> = g.p0.iter().map(|x| x.sin()).collect();
        let v: Vec<[f64; 3]> = g.nodes.iter().map(|p| [p[1], p[2] * p[0], p[0].cos()]).collect();
        let dq = g.grad_fwd_vec(&q);
        let mut dtv = vec![0.0; g.len()];
        g.grad_fwd_adjoint(&v, &mut dtv);
        let lhs: f64 = dq.iter().zip(&v).map(|(a, b)| dot3(*a, *b)).sum();
        let rhs: f64 = dtv.iter().zip(&q).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-11 * lhs.abs().max(1.0));
    }

    #[test]
    fn backward_gradient_is_the_mirrored_forward_one() {
        let g = build_momentum_grid(&MomentumGridConfig {
            radius: 2.0,
            points_per_axis: 8,
        })
        .unwrap();
        let f: Vec<f64> = g.nodes.iter().map(|p| (p[0] + 0.3 * p[1] * p[2]).exp()).collect();
        let back = g.mirrored(&g.grad_fwd_vec(&g.mirrored(&f)));
        let n = g.n;
        let k = 3 * n * n + 4 * n + 5;
        let expect = (f[k] - f[k - n * n]) / g.h;
        assert!((-back[k][0] - expect).abs() < 1e-12);
    }

    fn grid(r: f64, n: usize) -> MomentumGrid {
        build_momentum_grid(&MomentumGridConfig {
            radius: r,
            points_per_axis: n,
        })
        .unwrap()
    }

    #[test]
    fn energy_examples() {
        assert_eq!(energy_of([0.0; 3]), 1.0);
        assert!((energy_of([3.0, 4.0, 0.0]) - 26f64.sqrt()).abs() < 1e-15);
        assert_eq!(energy_of([0.3, -1.2, 2.0]), energy_of([-0.3, 1.2, -2.0]));
    }

    #[test]
    fn lorentz_examples() {
        let z = Momentum::new([0.0; 3]);
        let e1 = Momentum::new([1.0, 0.0, 0.0]);
        assert_eq!(lorentz_inner(z, z), -1.0);
        assert!((lorentz_inner(e1, z) + 2f64.sqrt()).abs() < 1e-15);
        let p = Momentum::new([0.7, -2.1, 5.3]);
        assert!((lorentz_inner(p, p) + 1.0).abs() < 1e-13);
    }

    #[test]
    fn p_hat_examples() {
        assert_eq!(p_hat(Momentum::new([0.0; 3])), [0.0; 3]);
        let v = p_hat(Momentum::new([1.0, 0.0, 0.0]));
        assert!((v[0] - 0.5f64.sqrt()).abs() < 1e-15);
        let v = p_hat(Momentum::new([1e6, 0.0, 0.0]));
        assert!(v[0] < 1.0 && v[0] > 0.999_999);
    }

    #[test]
    fn rejects_odd_axis() {
        assert_eq!(
            build_momentum_grid(&MomentumGridConfig {
                radius: 8.0,
                points_per_axis: 15
            })
            .unwrap_err(),
            GridError::BadAxisCount(15)
        );
        assert!(build_momentum_grid(&MomentumGridConfig {
            radius: 8.0,
            points_per_axis: 6
        })
        .is_err());
    }

    #[test]
    fn default_grid_measure_and_symmetry() {
        let g = grid(8.0, 16);
        let total: f64 = g.weights().iter().sum();
        assert!((total - 16f64.powi(3)).abs() < 1e-9);
        for k in 0..g.len() {
            let m = g.mirror(k);
            for a in 0..3 {
                assert_eq!(g.nodes[m][a], -g.nodes[k][a]);
            }
            assert!(g.nodes[k].iter().all(|x| x.abs() <= g.radius));
            assert!((lorentz_inner(g.momentum(k), g.momentum(k)) + 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn odd_moments_vanish() {
        let g = grid(8.0, 16);
        for a in 0..3 {
            let v: Vec<f64> = (0..g.len())
                .map(|k| g.nodes[k][a] * (-g.p0[k]).exp())
                .collect();
            assert!(g.integrate(&v).abs() < 1e-12 * g.weight);
        }
        let sign: Vec<f64> = g.nodes.iter().map(|p| p[0].signum()).collect();
        assert_eq!(g.integrate(&sign), 0.0);
        assert_eq!(g.integrate(&vec![0.0; g.len()]), 0.0);
    }

    #[test]
    fn gaussian_closed_form() {
        let g = grid(6.0, 32);
        let v: Vec<f64> = g
            .nodes
            .iter()
            .map(|p| (-dot3(*p, *p)).exp())
            .collect();
        let exact = std::f64::consts::PI.powf(1.5);
        assert!((g.integrate(&v) - exact).abs() / exact < 1e-6);
    }

    #[test]
    fn length_mismatch_is_error() {
        let g = grid(8.0, 8);
        assert!(matches!(
            integrate_p(&[1.0, 2.0], &g),
            Err(GridError::Length { .. })
        ));
    }

    #[test]
    fn gradient_exact_on_quadratics() {
        let g = grid(3.0, 8);
        let f: Vec<f64> = g
            .nodes
            .iter()
            .map(|p| 1.0 + 2.0 * p[0] - p[1] * p[1] + 0.5 * p[0] * p[2])
            .collect();
        let d = g.grad_vec(&f);
        for (k, p) in g.nodes.iter().enumerate() {
            let e = [2.0 + 0.5 * p[2], -2.0 * p[1], 0.5 * p[0]];
            for a in 0..3 {
                assert!((d[k][a] - e[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_identity() {
        let g = grid(2.0, 8);
        let f: Vec<f64> = (0..g.len()).map(|k| ((k * 37 % 101) as f64).sin()).collect();
        let v: Vec<[f64; 3]> = (0..g.len())
            .map(|k| {
                let x = k as f64;
                [(0.3 * x).cos(), (0.7 * x).sin(), (1.1 * x).cos()]
            })
            .collect();
        let df = g.grad_vec(&f);
        let mut dtv = vec![0.0; g.len()];
        g.grad_adjoint(&v, &mut dtv);
        let lhs: f64 = df.iter().zip(&v).map(|(a, b)| dot3(*a, *b)).sum();
        let rhs: f64 = f.iter().zip(&dtv).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        // D^T annihilates nothing but sums to zero: D 1 = 0
        let ones = vec![1.0; g.len()];
        let s: f64 = dtv.iter().zip(&ones).map(|(a, b)| a * b).sum();
        let d1 = g.grad_vec(&ones);
        assert!(d1.iter().all(|x| x.iter().all(|c| c.abs() < 1e-14)));
        assert!(s.abs() < 1e-9);
    }

    #[test]
    fn spatial_derivatives() {
        let s = SpatialGrid::new(64, 2.0 * std::f64::consts::PI).unwrap();
        let f: Vec<f64> = (0..64).map(|i| s.x(i).sin()).collect();
        let d = s.d1(&f);
        let err = (0..64)
            .map(|i| (d[i] - s.x(i).cos()).abs())
            .fold(0.0, f64::max);
        assert!(err < 2e-3);
        assert!(SpatialGrid::new(3, 1.0).is_err());
    }
}
