//! Relativistic Landau kernel and the nonlinear collision operator.
//!
//! The operator is discretised in weak (flux) form,
//! `C[g, h] = -D^T J`, with
//! `J_k = sum_l w Phi~_kl [ (D~g)_k h_l - g_k (D~h)_l ]`,
//! where `D` is the lattice gradient of [`MomentumGrid::grad`] and `D~` is that
//! gradient taken relative to an optional gauge density `m`:
//! `D~g = m D(g / m)`. The lattice kernel `Phi~_kl` is the pointwise kernel
//! projected orthogonally to `v_k - v_l`, where `v = D p0` is the discrete
//! velocity. With these choices
//!
//! * mass is conserved for every pair `(g, h)`,
//! * momentum and energy are conserved for `g = h`,
//! * `C[m, m] = 0` when the gauge is the Maxwellian `m` itself,
//!
//! all to rounding error.

use crate::phase_space::{dot3, GridError, Momentum, MomentumGrid};
use rayon::prelude::*;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CollisionError {
    #[error("kernel is singular on the diagonal p = q")]
    Diagonal,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("kernel cache i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("kernel cache {0} does not match the grid")]
    CacheMismatch(PathBuf),
}

/// Symmetric 3x3 matrix stored as `[xx, xy, xz, yy, yz, zz]`.
pub type Sym3 = [f64; 6];

#[inline]
pub fn sym_mul(s: &Sym3, v: [f64; 3]) -> [f64; 3] {
    [
        s[0] * v[0] + s[1] * v[1] + s[2] * v[2],
        s[1] * v[0] + s[3] * v[1] + s[4] * v[2],
        s[2] * v[0] + s[4] * v[1] + s[5] * v[2],
    ]
}

#[inline]
pub fn sym_quad(s: &Sym3, a: [f64; 3], b: [f64; 3]) -> f64 {
    dot3(a, sym_mul(s, b))
}

pub fn sym_to_mat(s: &Sym3) -> [[f64; 3]; 3] {
    [[s[0], s[1], s[2]], [s[1], s[3], s[4]], [s[2], s[4], s[5]]]
}

pub fn mat_to_sym(m: &[[f64; 3]; 3]) -> Sym3 {
    [m[0][0], m[0][1], m[0][2], m[1][1], m[1][2], m[2][2]]
}

/// Eigenvalues in ascending order.
pub fn sym_eigenvalues(s: &Sym3) -> [f64; 3] {
    let m = nalgebra::Matrix3::from_fn(|i, j| sym_to_mat(s)[i][j]);
    let mut e: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
    e.sort_by(f64::total_cmp);
    [e[0], e[1], e[2]]
}

pub fn sym_norm(s: &Sym3) -> f64 {
    (s[0] * s[0] + s[3] * s[3] + s[5] * s[5] + 2.0 * (s[1] * s[1] + s[2] * s[2] + s[4] * s[4]))
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelValue {
    pub lambda: f64,
    pub s: [[f64; 3]; 3],
    pub phi: [[f64; 3]; 3],
}

/// rho - 1 with rho = p0 q0 - p.q, evaluated without cancellation.
#[inline]
fn rho_minus_one(p: [f64; 3], q: [f64; 3], p0: f64, q0: f64) -> f64 {
    let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
    let de = (dot3(p, p) - dot3(q, q)) / (p0 + q0);
    (0.5 * (dot3(d, d) - de * de)).max(0.0)
}

fn kernel_core(p: [f64; 3], q: [f64; 3], eta2: f64) -> Option<KernelValue> {
    let p0 = crate::phase_space::energy_of(p);
    let q0 = crate::phase_space::energy_of(q);
    let rm1 = rho_minus_one(p, q, p0, q0);
    let g = rm1 * (rm1 + 2.0);
    if g == 0.0 || g < eta2 {
        return None;
    }
    let g = g + eta2;
    let rho = 1.0 + rm1;
    let lambda = rho * rho / (g * g.sqrt());
    let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
    let mut s = [[0.0; 3]; 3];
    let mut phi = [[0.0; 3]; 3];
    let c = lambda / (p0 * q0);
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { g } else { 0.0 };
            s[i][j] = id - d[i] * d[j] + rm1 * (p[i] * q[j] + q[i] * p[j]);
            phi[i][j] = c * s[i][j];
        }
    }
    Some(KernelValue { lambda, s, phi })
}

/// Pointwise kernel `Phi = Lambda S / (p0 q0)`; rejects the diagonal.
pub fn kernel_phi(p: Momentum, q: Momentum) -> Result<KernelValue, CollisionError> {
    kernel_core(p.p, q.p, 0.0).ok_or(CollisionError::Diagonal)
}

/// Kernel with `g -> g + eta^2`; `None` when `g < eta^2`.
pub fn kernel_phi_regularized(p: Momentum, q: Momentum, eta: f64) -> Option<KernelValue> {
    kernel_core(p.p, q.p, eta * eta)
}

/// Dense lattice kernel over node pairs `k < l`, independent of the solution.
pub struct KernelTable {
    pub n: usize,
    pub eta: f64,
    pub weight: f64,
    key: String,
    data: Vec<Sym3>,
}

#[inline]
fn row_offset(n: usize, k: usize) -> usize {
    k * n - k * (k + 1) / 2
}

impl KernelTable {
    /// Assemble the projected lattice kernel; `eta_factor` times the lattice
    /// spacing is the regularisation length.
    pub fn build(grid: &MomentumGrid, eta_factor: f64) -> Self {
        let n = grid.len();
        let eta = eta_factor * grid.h;
        let v = grid.grad_fwd_vec(&grid.p0);
        let total = n * (n - 1) / 2;
        let mut data = vec![[0.0; 6]; total];
        let mut rows: Vec<(usize, &mut [Sym3])> = Vec::with_capacity(n);
        let mut rest: &mut [Sym3] = &mut data;
        for k in 0..n {
            let (head, tail) = rest.split_at_mut(n - 1 - k);
            rows.push((k, head));
            rest = tail;
        }
        rows.into_par_iter().for_each(|(k, row)| {
            for (idx, l) in (k + 1..n).enumerate() {
                row[idx] = lattice_kernel(grid.nodes[k], grid.nodes[l], v[k], v[l], eta);
            }
        });
        Self {
            n,
            eta,
            weight: grid.weight,
            key: Self::cache_key(grid, eta_factor),
            data,
        }
    }

    fn cache_key(grid: &MomentumGrid, eta_factor: f64) -> String {
        format!("{}_fwd_eta{:016x}", grid.geometry_key(), eta_factor.to_bits())
    }

    /// Load the table from `dir` when a matching cache exists, otherwise
    /// build it and write the cache.
    pub fn load_or_build(
        grid: &MomentumGrid,
        eta_factor: f64,
        dir: Option<&Path>,
    ) -> Result<Self, CollisionError> {
        let Some(dir) = dir else {
            return Ok(Self::build(grid, eta_factor));
        };
        let path = dir.join(format!("kernel_{}.bin", Self::cache_key(grid, eta_factor)));
        if path.exists() {
            return Self::read_cache(&path, grid, eta_factor);
        }
        let t = Self::build(grid, eta_factor);
        std::fs::create_dir_all(dir)?;
        t.write_cache(&path)?;
        Ok(t)
    }

    fn write_cache(&self, path: &Path) -> Result<(), CollisionError> {
        let tmp = path.with_extension("tmp");
        let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        w.write_all(b"LKT1")?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&(self.key.len() as u64).to_le_bytes())?;
        w.write_all(self.key.as_bytes())?;
        for s in &self.data {
            for x in s {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        drop(w);
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    fn read_cache(path: &Path, grid: &MomentumGrid, eta_factor: f64) -> Result<Self, CollisionError> {
        let mismatch = || CollisionError::CacheMismatch(path.to_path_buf());
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let klen = u64::from_le_bytes(b8) as usize;
        let mut key = vec![0u8; klen];
        r.read_exact(&mut key)?;
        let want = Self::cache_key(grid, eta_factor);
        if &magic != b"LKT1" || n != grid.len() || key != want.as_bytes() {
            return Err(mismatch());
        }
        let total = n * (n - 1) / 2;
        let mut bytes = vec![0u8; total * 48];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(48)
            .map(|c| {
                let mut s = [0.0; 6];
                for (i, x) in s.iter_mut().enumerate() {
                    *x = f64::from_le_bytes(c[8 * i..8 * i + 8].try_into().unwrap());
                }
                s
            })
            .collect();
        Ok(Self {
            n,
            eta: eta_factor * grid.h,
            weight: grid.weight,
            key: want,
            data,
        })
    }

    /// Lattice kernel entry for `k != l` (unweighted).
    pub fn get(&self, k: usize, l: usize) -> Sym3 {
        assert_ne!(k, l);
        let (a, b) = if k < l { (k, l) } else { (l, k) };
        self.data[row_offset(self.n, a) + (b - a - 1)]
    }

    /// Batched weighted contractions in one sweep over the table:
    /// `A[k][b] = sum_{l != k} w Phi~_kl s[l][b]` for `ns` scalar inputs and
    /// `B[k][b] = sum_{l != k} w Phi~_kl v[l][b]` for `nv` vector inputs.
    /// Inputs and outputs are node-major (`index = node * batch + b`).
    pub fn contract(
        &self,
        s: &[f64],
        ns: usize,
        v: &[[f64; 3]],
        nv: usize,
    ) -> (Vec<Sym3>, Vec<[f64; 3]>) {
        assert_eq!(s.len(), self.n * ns);
        assert_eq!(v.len(), self.n * nv);
        let threads = rayon::current_num_threads().max(1);
        if threads == 1 || ns + nv <= 1 {
            return self.contract_serial(s, ns, v, nv);
        }
        // split the batch into column chunks; every output entry is produced
        // by the same sequence of operations regardless of the split
        let chunk = (ns + nv).div_ceil(threads).max(1);
        let mut tasks: Vec<(bool, usize, usize)> = Vec::new();
        let mut b = 0;
        while b < ns {
            let e = (b + chunk).min(ns);
            tasks.push((true, b, e));
            b = e;
        }
        let mut b = 0;
        while b < nv {
            let e = (b + chunk).min(nv);
            tasks.push((false, b, e));
            b = e;
        }
        let n = self.n;
        let parts: Vec<(Vec<Sym3>, Vec<[f64; 3]>)> = tasks
            .par_iter()
            .map(|&(is_s, b0, b1)| {
                let w = b1 - b0;
                if is_s {
                    let mut sub = Vec::with_capacity(n * w);
                    for l in 0..n {
                        sub.extend_from_slice(&s[l * ns + b0..l * ns + b1]);
                    }
                    self.contract_serial(&sub, w, &[], 0)
                } else {
                    let mut sub = Vec::with_capacity(n * w);
                    for l in 0..n {
                        sub.extend_from_slice(&v[l * nv + b0..l * nv + b1]);
                    }
                    self.contract_serial(&[], 0, &sub, w)
                }
            })
            .collect();
        let mut a = vec![[0.0; 6]; n * ns];
        let mut bv = vec![[0.0; 3]; n * nv];
        for (&(is_s, b0, b1), (pa, pb)) in tasks.iter().zip(parts) {
            let w = b1 - b0;
            for k in 0..n {
                if is_s {
                    a[k * ns + b0..k * ns + b1].copy_from_slice(&pa[k * w..(k + 1) * w]);
                } else {
                    bv[k * nv + b0..k * nv + b1].copy_from_slice(&pb[k * w..(k + 1) * w]);
                }
            }
        }
        (a, bv)
    }

    fn contract_serial(
        &self,
        s: &[f64],
        ns: usize,
        v: &[[f64; 3]],
        nv: usize,
    ) -> (Vec<Sym3>, Vec<[f64; 3]>) {
        let n = self.n;
        let mut a = vec![[0.0; 6]; n * ns];
        let mut bv = vec![[0.0; 3]; n * nv];
        let mut acc_s = vec![[0.0; 6]; ns];
        let mut acc_v = vec![[0.0; 3]; nv];
        for k in 0..n {
            acc_s.iter_mut().for_each(|x| *x = [0.0; 6]);
            acc_v.iter_mut().for_each(|x| *x = [0.0; 3]);
            let row = &self.data[row_offset(n, k)..row_offset(n, k) + (n - 1 - k)];
            let sk = &s[k * ns..(k + 1) * ns];
            let vk = &v[k * nv..(k + 1) * nv];
            for (idx, f) in row.iter().enumerate() {
                let l = k + 1 + idx;
                if ns > 0 {
                    let sl = &s[l * ns..(l + 1) * ns];
                    let al = &mut a[l * ns..(l + 1) * ns];
                    for b in 0..ns {
                        let x = sl[b];
                        let y = sk[b];
                        let ak = &mut acc_s[b];
                        let alb = &mut al[b];
                        for c in 0..6 {
                            ak[c] += f[c] * x;
                            alb[c] += f[c] * y;
                        }
                    }
                }
                if nv > 0 {
                    let vl = &v[l * nv..(l + 1) * nv];
                    let bl = &mut bv[l * nv..(l + 1) * nv];
                    for b in 0..nv {
                        let x = sym_mul(f, vl[b]);
                        let y = sym_mul(f, vk[b]);
                        let acc = &mut acc_v[b];
                        let blb = &mut bl[b];
                        for c in 0..3 {
                            acc[c] += x[c];
                            blb[c] += y[c];
                        }
                    }
                }
            }
            for b in 0..ns {
                for c in 0..6 {
                    a[k * ns + b][c] += acc_s[b][c];
                }
            }
            for b in 0..nv {
                for c in 0..3 {
                    bv[k * nv + b][c] += acc_v[b][c];
                }
            }
        }
        let w = self.weight;
        a.iter_mut().for_each(|x| x.iter_mut().for_each(|c| *c *= w));
        bv.iter_mut().for_each(|x| x.iter_mut().for_each(|c| *c *= w));
        (a, bv)
    }

    /// [`KernelTable::contract`] against the mirror-averaged kernel
    /// `½(Φ~_kl + Φ~_{k'l'})`, primes denoting `p -> -p`.
    pub fn contract_sym(
        &self,
        s: &[f64],
        ns: usize,
        v: &[[f64; 3]],
        nv: usize,
    ) -> (Vec<Sym3>, Vec<[f64; 3]>) {
        let n = self.n;
        let mut s2 = Vec::with_capacity(2 * s.len());
        for k in 0..n {
            s2.extend_from_slice(&s[k * ns..(k + 1) * ns]);
            s2.extend_from_slice(&s[(n - 1 - k) * ns..(n - k) * ns]);
        }
        let mut v2 = Vec::with_capacity(2 * v.len());
        for k in 0..n {
            v2.extend_from_slice(&v[k * nv..(k + 1) * nv]);
            v2.extend_from_slice(&v[(n - 1 - k) * nv..(n - k) * nv]);
        }
        let (a2, b2) = self.contract(&s2, 2 * ns, &v2, 2 * nv);
        let mut a = vec![[0.0; 6]; n * ns];
        let mut b = vec![[0.0; 3]; n * nv];
        for k in 0..n {
            let km = n - 1 - k;
            for c in 0..ns {
                let x = a2[k * 2 * ns + c];
                let y = a2[km * 2 * ns + ns + c];
                for q in 0..6 {
                    a[k * ns + c][q] = 0.5 * (x[q] + y[q]);
                }
            }
            for c in 0..nv {
                let x = b2[k * 2 * nv + c];
                let y = b2[km * 2 * nv + nv + c];
                for q in 0..3 {
                    b[k * nv + c][q] = 0.5 * (x[q] + y[q]);
                }
            }
        }
        (a, b)
    }

    /// Approximate resident size in bytes.
    pub fn bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<Sym3>()
    }
}

fn lattice_kernel(p: [f64; 3], q: [f64; 3], vp: [f64; 3], vq: [f64; 3], eta: f64) -> Sym3 {
    let Some(kv) = kernel_core(p, q, eta * eta) else {
        return [0.0; 6];
    };
    let phi = mat_to_sym(&kv.phi);
    let w = [vp[0] - vq[0], vp[1] - vq[1], vp[2] - vq[2]];
    let nw = dot3(w, w).sqrt();
    if nw == 0.0 {
        return phi;
    }
    let w = [w[0] / nw, w[1] / nw, w[2] / nw];
    let a = sym_mul(&phi, w);
    let c = dot3(w, a);
    let mut out = [0.0; 6];
    let idx = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];
    for (o, &(i, j)) in out.iter_mut().zip(&idx) {
        *o = phi[sym_index(i, j)] - w[i] * a[j] - a[i] * w[j] + c * w[i] * w[j];
    }
    out
}

#[inline]
fn sym_index(i: usize, j: usize) -> usize {
    match (i.min(j), i.max(j)) {
        (0, 0) => 0,
        (0, 1) => 1,
        (0, 2) => 2,
        (1, 1) => 3,
        (1, 2) => 4,
        _ => 5,
    }
}

/// Forward gradient of `g` relative to the gauge density `m`: `m D+(g/m)`;
/// the plain forward gradient when no gauge is given.
pub fn fitted_grad(grid: &MomentumGrid, g: &[f64], gauge: Option<&[f64]>) -> Vec<[f64; 3]> {
    match gauge {
        None => grid.grad_fwd_vec(g),
        Some(m) => {
            let phi: Vec<f64> = g.iter().zip(m).map(|(a, b)| a / b).collect();
            let mut d = grid.grad_fwd_vec(&phi);
            for (dk, mk) in d.iter_mut().zip(m) {
                for c in dk.iter_mut() {
                    *c *= mk;
                }
            }
            d
        }
    }
}

/// One collision evaluation request: `C[g, h]` in the gauge `m`.
#[derive(Clone, Copy)]
pub struct CollisionInput<'a> {
    pub g: &'a [f64],
    pub h: &'a [f64],
    pub gauge: Option<&'a [f64]>,
}

/// Evaluate many `C[g, h]` with a single pass over the kernel table.
///
/// The operator is the mean of the forward-difference discretisation and its
/// backward twin; the latter is the forward one conjugated by the mirror
/// `p -> -p`, so both share the same table.
pub fn collision_batch(
    table: &KernelTable,
    grid: &MomentumGrid,
    inputs: &[CollisionInput<'_>],
) -> Vec<Vec<f64>> {
    let n = grid.len();
    let nb = inputs.len();
    if nb == 0 {
        return Vec::new();
    }
    let mirrored: Vec<(Vec<f64>, Vec<f64>, Option<Vec<f64>>)> = inputs
        .iter()
        .map(|i| {
            (
                grid.mirrored(i.g),
                grid.mirrored(i.h),
                i.gauge.map(|m| grid.mirrored(m)),
            )
        })
        .collect();
    let all: Vec<CollisionInput> = inputs
        .iter()
        .copied()
        .chain(mirrored.iter().map(|(g, h, m)| CollisionInput {
            g,
            h,
            gauge: m.as_deref(),
        }))
        .collect();
    let out = collision_batch_fwd(table, grid, &all);
    (0..nb)
        .map(|b| {
            let back = &out[nb + b];
            (0..n).map(|k| 0.5 * (out[b][k] + back[n - 1 - k])).collect()
        })
        .collect()
}

fn collision_batch_fwd(
    table: &KernelTable,
    grid: &MomentumGrid,
    inputs: &[CollisionInput<'_>],
) -> Vec<Vec<f64>> {
    let n = grid.len();
    let nb = inputs.len();
    let mut s = vec![0.0; n * nb];
    let mut v = vec![[0.0; 3]; n * nb];
    let dg: Vec<Vec<[f64; 3]>> = inputs
        .par_iter()
        .map(|inp| fitted_grad(grid, inp.g, inp.gauge))
        .collect();
    for (b, inp) in inputs.iter().enumerate() {
        let dh = fitted_grad(grid, inp.h, inp.gauge);
        for k in 0..n {
            s[k * nb + b] = inp.h[k];
            v[k * nb + b] = dh[k];
        }
    }
    let (a, bv) = table.contract(&s, nb, &v, nb);
    (0..nb)
        .into_par_iter()
        .map(|b| {
            let g = inputs[b].g;
            let flux: Vec<[f64; 3]> = (0..n)
                .map(|k| {
                    let x = sym_mul(&a[k * nb + b], dg[b][k]);
                    let y = bv[k * nb + b];
                    [x[0] - g[k] * y[0], x[1] - g[k] * y[1], x[2] - g[k] * y[2]]
                })
                .collect();
            grid.div_fwd(&flux)
        })
        .collect()
}

/// `C[g, h]` at one spatial point.
pub fn collision_bilinear(
    table: &KernelTable,
    grid: &MomentumGrid,
    g: &[f64],
    h: &[f64],
    gauge: Option<&[f64]>,
) -> Vec<f64> {
    collision_batch(table, grid, &[CollisionInput { g, h, gauge }]).remove(0)
}

/// `int (1, p, p0) C dp`: `[mass, p1, p2, p3, energy]`.
pub fn moments5(grid: &MomentumGrid, c: &[f64]) -> [f64; 5] {
    let n = grid.len();
    let mut out = [0.0; 5];
    out[0] = grid.integrate(c);
    for a in 0..3 {
        let v: Vec<f64> = (0..n).map(|k| grid.nodes[k][a] * c[k]).collect();
        out[1 + a] = grid.integrate(&v);
    }
    let v: Vec<f64> = (0..n).map(|k| grid.p0[k] * c[k]).collect();
    out[4] = grid.integrate(&v);
    out
}

pub fn invariant_residuals(
    table: &KernelTable,
    grid: &MomentumGrid,
    g: &[f64],
    h: &[f64],
    gauge: Option<&[f64]>,
) -> [f64; 5] {
    moments5(grid, &collision_bilinear(table, grid, g, h, gauge))
}

/// `kappa(p) = 2^{7/2} pi p0 int_0^pi (1 + |p|^2 sin^2 t)^{-3/2} sin t dt`.
pub fn kappa(p: [f64; 3]) -> f64 {
    let r2 = dot3(p, p);
    let f = |t: f64| {
        let s = t.sin();
        s / (1.0 + r2 * s * s).powf(1.5)
    };
    let i = quadrature::double_exponential::integrate(f, 0.0, std::f64::consts::PI, 1e-14).integral;
    2f64.powf(3.5) * std::f64::consts::PI * crate::phase_space::energy_of(p) * i
}

/// Coefficients of the non-divergence rearrangement
/// `C[F, F] = A:D^2 F + drift.DF + (reaction + kappa F) F`.
#[derive(Debug, Clone)]
pub struct NonDivergence {
    pub diffusion: Vec<Sym3>,
    pub drift: Vec<[f64; 3]>,
    /// `4 int p^mu q_mu / (p0 q0) ((p^mu q_mu)^2 - 1)^{-1/2} F(q) dq`
    pub reaction: Vec<f64>,
    pub kappa: Vec<f64>,
}

impl NonDivergence {
    /// Evaluate the rearranged operator with lattice derivatives of `f`.
    pub fn assemble(&self, grid: &MomentumGrid, f: &[f64]) -> Vec<f64> {
        let n = grid.len();
        let df = grid.grad_vec(f);
        let comps: Vec<Vec<f64>> = (0..3).map(|a| df.iter().map(|d| d[a]).collect()).collect();
        let hess: Vec<Vec<[f64; 3]>> = comps.iter().map(|c| grid.grad_vec(c)).collect();
        (0..n)
            .map(|k| {
                let a = &self.diffusion[k];
                let m = sym_to_mat(a);
                let mut s = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        s += m[i][j] * hess[i][k][j];
                    }
                }
                s + dot3(self.drift[k], df[k]) + (self.reaction[k] + self.kappa[k] * f[k]) * f[k]
            })
            .collect()
    }
}

/// Coefficients of the non-divergence form for `F` at one spatial point.
pub fn nondivergence_form(table: &KernelTable, grid: &MomentumGrid, f: &[f64]) -> NonDivergence {
    let n = grid.len();
    let df = grid.grad_vec(f);
    let (a, b) = table.contract_sym(f, 1, &df, 1);
    // div_p of the diffusion matrix, column-wise: (d_i A_ij)_j
    let mut div_a = vec![[0.0; 3]; n];
    for i in 0..3 {
        for j in 0..3 {
            let comp: Vec<f64> = a.iter().map(|s| s[sym_index(i, j)]).collect();
            let d = grid.grad_vec(&comp);
            for k in 0..n {
                div_a[k][j] += d[k][i];
            }
        }
    }
    let drift = (0..n)
        .map(|k| {
            [
                div_a[k][0] - b[k][0],
                div_a[k][1] - b[k][1],
                div_a[k][2] - b[k][2],
            ]
        })
        .collect();
    let eta = table.eta;
    let reaction = (0..n)
        .into_par_iter()
        .map(|k| {
            let p = grid.nodes[k];
            let mut acc = Vec::with_capacity(n);
            for l in 0..n {
                if l == k {
                    acc.push(0.0);
                    continue;
                }
                let q = grid.nodes[l];
                let rm1 = rho_minus_one(p, q, grid.p0[k], grid.p0[l]);
                let g = rm1 * (rm1 + 2.0);
                if g < eta * eta {
                    acc.push(0.0);
                    continue;
                }
                let pq = -(1.0 + rm1);
                acc.push(pq / (grid.p0[k] * grid.p0[l]) / (g + eta * eta).sqrt() * f[l]);
            }
            4.0 * grid.integrate(&acc)
        })
        .collect();
    let kappa = grid.nodes.par_iter().map(|&p| kappa(p)).collect();
    NonDivergence {
        diffusion: a,
        drift,
        reaction,
        kappa,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{CellState, Juttner};
    use crate::phase_space::{build_momentum_grid, energy_of, p_hat, MomentumGridConfig};
    use rand::{Rng, SeedableRng};

    fn small_grid() -> MomentumGrid {
        build_momentum_grid(&MomentumGridConfig {
            radius: 3.0,
            points_per_axis: 8,
        })
        .unwrap()
    }

    #[test]
    fn worked_example() {
        let kv = kernel_phi(Momentum::new([1.0, 0.0, 0.0]), Momentum::new([0.0; 3])).unwrap();
        assert!((kv.lambda - 2.0).abs() < 1e-14);
        let s = [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((kv.s[i][j] - s[i][j]).abs() < 1e-14);
                assert!((kv.phi[i][j] - 2f64.sqrt() * s[i][j]).abs() < 1e-14);
            }
        }
        assert!(matches!(
            kernel_phi(Momentum::new([0.5; 3]), Momentum::new([0.5; 3])),
            Err(CollisionError::Diagonal)
        ));
    }

    #[test]
    fn projection_identity_and_psd() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let p: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-4.0..4.0));
            let q: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-4.0..4.0));
            let kv = kernel_phi(Momentum::new(p), Momentum::new(q)).unwrap();
            let s = mat_to_sym(&kv.phi);
            let a = p_hat(Momentum::new(p));
            let b = p_hat(Momentum::new(q));
            let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let r = sym_mul(&s, d);
            assert!(dot3(r, r).sqrt() <= 1e-10 * sym_norm(&s) * dot3(d, d).sqrt().max(1e-300));
            let e = sym_eigenvalues(&s);
            assert!(e[0] >= -1e-12 * e[2]);
            // the null direction is the minimiser of w^T Phi w
            assert!(e[1] > 1e-8 * e[2]);
        }
    }

    #[test]
    fn kappa_closed_form() {
        let k0 = kappa([0.0; 3]);
        assert!((k0 - 2f64.powf(4.5) * std::f64::consts::PI).abs() < 1e-10);
        // the angular integral is 2 / (1 + |p|^2)
        let p = [1.0, 2.0, -0.5];
        let want = 2f64.powf(4.5) * std::f64::consts::PI / energy_of(p);
        assert!((kappa(p) - want).abs() < 1e-10 * want);
    }

    #[test]
    fn table_matches_pointwise_projected_kernel() {
        let g = small_grid();
        let t = KernelTable::build(&g, 1e-3);
        let v = g.grad_fwd_vec(&g.p0);
        for &(k, l) in &[(0, 1), (5, 300), (511, 3)] {
            let s = t.get(k, l);
            let w = [v[k][0] - v[l][0], v[k][1] - v[l][1], v[k][2] - v[l][2]];
            let r = sym_mul(&s, w);
            assert!(dot3(r, r).sqrt() <= 1e-12 * sym_norm(&s) * dot3(w, w).sqrt());
            assert!(sym_eigenvalues(&s)[0] >= -1e-12 * sym_norm(&s));
        }
    }

    #[test]
    fn batched_contraction_equals_direct_sum() {
        let g = small_grid();
        let t = KernelTable::build(&g, 1e-3);
        let n = g.len();
        let s: Vec<f64> = (0..2 * n).map(|i| ((i * 13) as f64).sin()).collect();
        let v: Vec<[f64; 3]> = (0..n).map(|i| [(i as f64).cos(), 0.5, -(i as f64).sin()]).collect();
        let (a, b) = t.contract(&s, 2, &v, 1);
        for &k in &[0usize, 77, 511] {
            let mut ea = [0.0; 6];
            let mut eb = [0.0; 3];
            for l in 0..n {
                if l == k {
                    continue;
                }
                let f = t.get(k, l);
                for c in 0..6 {
                    ea[c] += t.weight * f[c] * s[l * 2 + 1];
                }
                let m = sym_mul(&f, v[l]);
                for c in 0..3 {
                    eb[c] += t.weight * m[c];
                }
            }
            for c in 0..6 {
                assert!((a[k * 2 + 1][c] - ea[c]).abs() < 1e-12 * (1.0 + ea[c].abs()));
            }
            for c in 0..3 {
                assert!((b[k][c] - eb[c]).abs() < 1e-12 * (1.0 + eb[c].abs()));
            }
        }
    }

    #[test]
    fn equilibrium_and_conservation() {
        let g = small_grid();
        let t = KernelTable::build(&g, 1e-3);
        let j = Juttner::new(CellState {
            n0: 1.0,
            u: [0.05, 0.0, -0.02],
            t0: 0.4,
        })
        .unwrap();
        let m = j.on_grid(&g);
        let c = collision_bilinear(&t, &g, &m, &m, Some(&m));
        let scale = m.iter().cloned().fold(0.0, f64::max);
        assert!(c.iter().all(|x| x.abs() < 1e-12 * scale));
        // perturbed state, g = h
        let f: Vec<f64> = (0..g.len())
            .map(|k| m[k] * (1.0 + 0.1 * (g.nodes[k][0] - 0.3 * g.nodes[k][1] * g.nodes[k][2]).sin()))
            .collect();
        let c = collision_bilinear(&t, &g, &f, &f, Some(&m));
        let r = moments5(&g, &c);
        let en: Vec<f64> = (0..g.len()).map(|k| g.p0[k] * f[k]).collect();
        let e = g.integrate(&en);
        for x in r {
            assert!(x.abs() < 1e-12 * e, "{r:?}");
        }
        let z = vec![0.0; g.len()];
        assert_eq!(invariant_residuals(&t, &g, &z, &z, None), [0.0; 5]);
    }

    #[test]
    fn bilinearity() {
        let g = small_grid();
        let t = KernelTable::build(&g, 1e-3);
        let a: Vec<f64> = g.p0.iter().map(|e| (-2.0 * e).exp()).collect();
        let b: Vec<f64> = g.nodes.iter().map(|p| (-dot3(*p, *p)).exp() * (1.0 + p[0])).collect();
        let c1 = collision_bilinear(&t, &g, &a, &b, None);
        let a3: Vec<f64> = a.iter().map(|x| 3.0 * x).collect();
        let c3 = collision_bilinear(&t, &g, &a3, &b, None);
        let s = c1.iter().map(|x| x.abs()).fold(0.0, f64::max);
        for (x, y) in c1.iter().zip(&c3) {
            assert!((3.0 * x - y).abs() < 1e-12 * s);
        }
    }
}
