//! Orchestration behind the `landau` command: the property suites, the
//! pipeline stages, and every file they write.
//!
//! Each subcommand writes into `output_dir`: its outputs, a canonical copy of
//! the configuration, a `manifest-<subcommand>.toml` and a refreshed
//! `summary.md`. Nothing time-dependent is written, so a fixed configuration
//! reproduces every artifact byte for byte.

use crate::collision::{
    collision_bilinear, kernel_phi, mat_to_sym, moments5, sym_eigenvalues, sym_mul, sym_norm, KernelTable,
};
use crate::config::{ClosureKind, ConfigError, RunConfig};
use crate::equilibrium::{CellState, Juttner};
use crate::euler_fluid::{Closure, EulerSolver};
use crate::hilbert_expansion::{Backbone, HilbertBuilder};
use crate::linearized::{
    apply_l_batch, coercivity_fit, invariants, reference_factor, smooth_sample, solve_batch, LocalMaxwellian,
    Preconditioner,
};
use crate::phase_space::{build_momentum_grid, dot3, p_hat, Momentum, MomentumGrid, SpatialGrid};
use crate::remainder_solver::{knudsen_sweep, loglog_slope, RemainderError, RunSeries, SolverContext, SweepResult};
use plotters::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PREREQUISITE: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub const BACKBONE_FILE: &str = "backbone.bin";
pub const BACKBONE_KEY_FILE: &str = "backbone.key";
pub const SWEEP_FILE: &str = "sweep_result.csv";

/// Acceptance thresholds; the summary and the acceptance suite read these.
pub mod thresholds {
    pub const KERNEL_PROJECTION: f64 = 1e-10;
    pub const KERNEL_EIGEN_FLOOR: f64 = -1e-12;
    pub const KERNEL_RUNTIME_S: f64 = 10.0;
    pub const EQUILIBRIUM: f64 = 1e-6;
    pub const EQUILIBRIUM_REFINEMENT: f64 = 3.0;
    /// values at or below this are rounding noise
    pub const ROUNDOFF: f64 = 1e-13;
    pub const EQUILIBRIUM_RUNTIME_S: f64 = 60.0;
    pub const CONSERVATION: f64 = 1e-8;
    pub const NULL_SPACE: f64 = 1e-5;
    pub const SELF_ADJOINT: f64 = 1e-8;
    pub const COERCIVITY_SPREAD: f64 = 0.2;
    pub const ROUND_TRIP: f64 = 1e-5;
    pub const ROUND_TRIP_RUNTIME_S: f64 = 120.0;
    pub const SLOPE_LOW: f64 = 0.7;
    pub const SLOPE_HIGH: f64 = 1.3;
    pub const C_FIT_FACTOR: f64 = 2.0;
    pub const POSITIVITY: f64 = -1e-8;
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing prerequisite: {0}")]
    Prerequisite(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Output { .. } => EXIT_CONFIG,
            Self::Prerequisite(_) => EXIT_PREREQUISITE,
            Self::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

fn numerical(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Numerical(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    CheckKernel,
    CheckLinearized,
    EulerSolve,
    HilbertBuild,
    KnudsenSweep,
    Report,
}

impl Subcommand {
    pub const ALL: [Subcommand; 6] = [
        Self::CheckKernel,
        Self::CheckLinearized,
        Self::EulerSolve,
        Self::HilbertBuild,
        Self::KnudsenSweep,
        Self::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::CheckKernel => "check-kernel",
            Self::CheckLinearized => "check-linearized",
            Self::EulerSolve => "euler-solve",
            Self::HilbertBuild => "hilbert-build",
            Self::KnudsenSweep => "knudsen-sweep",
            Self::Report => "report",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// One pass/fail line tied to an acceptance criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub criterion: u8,
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(criterion: u8, name: &str, value: f64, threshold: f64, pass: bool, detail: String) -> Self {
        Self {
            criterion,
            name: name.to_string(),
            value,
            threshold,
            pass,
            detail: detail.replace(',', ";"),
        }
    }

    fn below(criterion: u8, name: &str, value: f64, threshold: f64, detail: String) -> Self {
        Self::new(criterion, name, value, threshold, value <= threshold, detail)
    }
}

/// Serialised writer rooted at the output directory; remembers every file.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self, HarnessError> {
        std::fs::create_dir_all(dir).map_err(|source| HarnessError::Output {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), HarnessError> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(|source| HarnessError::Output { path, source })?;
        self.record(name);
        Ok(())
    }

    /// Note a file written by someone else (plots, the backbone).
    pub fn record(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T], header: &[&str]) -> Result<(), HarnessError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(header).map_err(numerical)?;
        for r in rows {
            w.serialize(r).map_err(numerical)?;
        }
        let bytes = w.into_inner().map_err(numerical)?;
        self.write(name, &bytes)
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    subcommand: &'a str,
    config_hash: String,
    seed: u64,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

const CHECK_HEADER: [&str; 6] = ["criterion", "name", "value", "threshold", "pass", "detail"];

pub fn read_checks(path: &Path) -> Result<Vec<Check>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::Prerequisite(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<Check>, _>>()
        .map_err(|e| HarnessError::Prerequisite(format!("{}: {e}", path.display())))
}

/// Kernel table for the configured grid, through the cache when one is set.
pub fn kernel_table(cfg: &RunConfig, grid: &MomentumGrid) -> Result<KernelTable, HarnessError> {
    KernelTable::load_or_build(grid, cfg.collision.eta_reg, cfg.collision.table_cache_path.as_deref()).map_err(numerical)
}

pub fn momentum_grid(cfg: &RunConfig) -> Result<MomentumGrid, HarnessError> {
    build_momentum_grid(&cfg.momentum_grid()).map_err(|e| HarnessError::Config(ConfigError::Invalid(e.to_string())))
}

fn spatial_grid(cfg: &RunConfig) -> Result<SpatialGrid, HarnessError> {
    SpatialGrid::new(cfg.space.cells, cfg.space.length)
        .map_err(|e| HarnessError::Config(ConfigError::Invalid(e.to_string())))
}

/// Drifting test state used by the collision and linearized suites.
pub fn test_state(cfg: &RunConfig) -> CellState {
    CellState {
        n0: cfg.euler.density,
        u: [0.05, 0.0, -0.02],
        t0: cfg.euler.temperature,
    }
}

/// `‖Φ (q̂ - p̂)‖ / (‖Φ‖ ‖q̂ - p̂‖)` and the smallest eigenvalue of `Φ / ‖Φ‖`
/// over seeded random pairs in the momentum box.
pub fn kernel_identity_check(cfg: &RunConfig) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = cfg.momentum.radius;
    let mut proj: f64 = 0.0;
    let mut eig: f64 = f64::INFINITY;
    let pairs = cfg.checks.kernel_pairs;
    for _ in 0..pairs {
        let p: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-r..r));
        let q: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-r..r));
        let (pm, qm) = (Momentum::new(p), Momentum::new(q));
        let Ok(kv) = kernel_phi(pm, qm) else { continue };
        let s = mat_to_sym(&kv.phi);
        let norm = sym_norm(&s);
        let (a, b) = (p_hat(pm), p_hat(qm));
        let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = sym_mul(&s, d);
        proj = proj.max(dot3(v, v).sqrt() / (norm * dot3(d, d).sqrt()));
        eig = eig.min(sym_eigenvalues(&s)[0] / norm);
    }
    vec![
        Check::below(
            1,
            "kernel_projection",
            proj,
            thresholds::KERNEL_PROJECTION,
            format!("max over {pairs} seeded pairs"),
        ),
        Check::new(
            1,
            "kernel_min_eigenvalue",
            eig,
            thresholds::KERNEL_EIGEN_FLOOR,
            eig >= thresholds::KERNEL_EIGEN_FLOOR,
            "smallest eigenvalue over the norm".into(),
        ),
    ]
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// `max|C[M, M]|` relative to the collision scale `max|C[M, M']|`, where
/// `M'` is the test state heated by half.
fn annihilation(grid: &MomentumGrid, table: &KernelTable, state: CellState, gauged: bool) -> f64 {
    let m = Juttner::new(state).expect("test state is admissible").on_grid(grid);
    let hot = Juttner::new(CellState {
        t0: 1.5 * state.t0,
        ..state
    })
    .expect("test state is admissible")
    .on_grid(grid);
    let scale = max_abs(&collision_bilinear(table, grid, &m, &hot, None));
    let c = collision_bilinear(table, grid, &m, &m, gauged.then_some(m.as_slice()));
    max_abs(&c) / scale
}

/// Criterion 2 at the configured grid, and under a doubling of the axis
/// resolution from 8 to 16 points.
pub fn equilibrium_check(cfg: &RunConfig, grid: &MomentumGrid, table: &KernelTable) -> Result<Vec<Check>, HarnessError> {
    let state = test_state(cfg);
    let value = annihilation(grid, table, state, true);
    let pair = |gauged: bool| -> Result<(f64, f64), HarnessError> {
        let mut out = [0.0; 2];
        for (o, n) in out.iter_mut().zip([8usize, 16]) {
            let g = build_momentum_grid(&crate::phase_space::MomentumGridConfig {
                radius: cfg.momentum.radius,
                points_per_axis: n,
            })
            .map_err(numerical)?;
            let t = KernelTable::build(&g, cfg.collision.eta_reg);
            *o = annihilation(&g, &t, state, gauged);
        }
        Ok((out[0], out[1]))
    };
    let (coarse, fine) = pair(true)?;
    let (plain_coarse, plain_fine) = pair(false)?;
    let floor = thresholds::ROUNDOFF;
    let ratio = if fine > 0.0 { coarse / fine } else { f64::INFINITY };
    let refined = ratio >= thresholds::EQUILIBRIUM_REFINEMENT || (coarse <= floor && fine <= floor);
    Ok(vec![
        Check::below(
            2,
            "equilibrium_annihilation",
            value,
            thresholds::EQUILIBRIUM,
            format!("max|C[M,M]| / max|C[M,M']| on the configured grid; ungauged form {:.3e}", annihilation(grid, table, state, false)),
        ),
        Check::new(
            2,
            "equilibrium_refinement",
            ratio,
            thresholds::EQUILIBRIUM_REFINEMENT,
            refined,
            format!(
                "8 -> 16 points: {coarse:.3e} -> {fine:.3e}; both at rounding level counts as refined; ungauged form {plain_coarse:.3e} -> {plain_fine:.3e}"
            ),
        ),
    ])
}

/// Criterion 3: the five invariant moments of `C[g, g]` for a perturbed
/// Jüttner, relative to its energy.
pub fn conservation_check(cfg: &RunConfig, grid: &MomentumGrid, table: &KernelTable) -> Vec<Check> {
    let m = Juttner::new(test_state(cfg)).expect("test state is admissible").on_grid(grid);
    let f: Vec<f64> = (0..grid.len())
        .map(|k| {
            let p = grid.nodes[k];
            m[k] * (1.0 + 0.1 * (p[0] - 0.3 * p[1] * p[2]).sin())
        })
        .collect();
    let c = collision_bilinear(table, grid, &f, &f, Some(&m));
    let en: Vec<f64> = (0..grid.len()).map(|k| grid.p0[k] * f[k]).collect();
    let scale = grid.integrate(&en);
    let r = moments5(grid, &c);
    let names = ["mass", "momentum_1", "momentum_2", "momentum_3", "energy"];
    r.iter()
        .zip(names)
        .map(|(x, n)| {
            Check::below(
                3,
                &format!("conservation_{n}"),
                x.abs() / scale,
                thresholds::CONSERVATION,
                "relative to the energy of g".into(),
            )
        })
        .collect()
}

/// Criterion 4: null space, symmetry and the resolution stability of the
/// fitted coercivity constant.
pub fn linearized_structure_check(
    cfg: &RunConfig,
    grid: &MomentumGrid,
    table: &KernelTable,
) -> Result<Vec<Check>, HarnessError> {
    let cell = LocalMaxwellian::new(test_state(cfg), grid, table).map_err(numerical)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4c);
    let samples: Vec<Vec<f64>> = (0..16).map(|_| smooth_sample(grid, &cell, &mut rng)).collect();
    let nulls: Vec<Vec<f64>> = (0..5)
        .map(|a| (0..grid.len()).map(|k| invariants(grid, k)[a] * cell.sqrt_m[k]).collect())
        .collect();
    let inputs: Vec<&[f64]> = samples.iter().chain(&nulls).map(|v| v.as_slice()).collect();
    let cells = vec![&cell; inputs.len()];
    let l = apply_l_batch(table, grid, &cells, &inputs);
    let scale = samples
        .iter()
        .zip(&l)
        .map(|(f, lf)| grid.norm(lf) / grid.norm(f))
        .fold(0.0, f64::max);
    let null = nulls
        .iter()
        .zip(&l[samples.len()..])
        .map(|(f, lf)| grid.norm(lf) / grid.norm(f) / scale)
        .fold(0.0, f64::max);
    let mut sym: f64 = 0.0;
    for i in 0..samples.len() / 2 {
        let (f, g) = (&samples[2 * i], &samples[2 * i + 1]);
        let (lf, lg) = (&l[2 * i], &l[2 * i + 1]);
        let d = (grid.inner(lf, g) - grid.inner(f, lg)).abs();
        sym = sym.max(d / (grid.norm(lf) * grid.norm(g)).max(grid.norm(f) * grid.norm(lg)));
    }
    let n2 = cfg.checks.coercivity_points;
    let grid2 = build_momentum_grid(&crate::phase_space::MomentumGridConfig {
        radius: cfg.momentum.radius,
        points_per_axis: n2,
    })
    .map_err(numerical)?;
    let table2 = KernelTable::build(&grid2, cfg.collision.eta_reg);
    let cell2 = LocalMaxwellian::new(test_state(cfg), &grid2, &table2).map_err(numerical)?;
    let s = cfg.checks.coercivity_samples;
    let d1 = coercivity_fit(table, grid, &cell, s, cfg.seed).delta;
    let d2 = coercivity_fit(&table2, &grid2, &cell2, s, cfg.seed).delta;
    let spread = (d1 - d2).abs() / d1.max(d2);
    Ok(vec![
        Check::below(
            4,
            "null_space",
            null,
            thresholds::NULL_SPACE,
            "max ‖L φ‖/‖φ‖ over the five invariants over the operator scale".into(),
        ),
        Check::below(
            4,
            "self_adjointness",
            sym,
            thresholds::SELF_ADJOINT,
            "max |<Lf;g> - <f;Lg>| / (‖Lf‖‖g‖) over 8 seeded pairs".into(),
        ),
        Check::new(
            4,
            "coercivity_stability",
            spread,
            thresholds::COERCIVITY_SPREAD,
            d1 > 0.0 && d2 > 0.0 && spread <= thresholds::COERCIVITY_SPREAD,
            format!(
                "delta = {d1:.4e} at {} points and {d2:.4e} at {n2} points; {s} samples",
                grid.n
            ),
        ),
    ])
}

/// Criterion 5: `L^{-1} L g = (I - P) g` over seeded smooth samples.
pub fn round_trip_check(cfg: &RunConfig, grid: &MomentumGrid, table: &KernelTable) -> Result<Vec<Check>, HarnessError> {
    let cell = LocalMaxwellian::new(test_state(cfg), grid, table).map_err(numerical)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x52);
    let count = cfg.checks.roundtrip_samples;
    let gs: Vec<Vec<f64>> = (0..count).map(|_| smooth_sample(grid, &cell, &mut rng)).collect();
    let refs: Vec<&[f64]> = gs.iter().map(|v| v.as_slice()).collect();
    let cells = vec![&cell; count];
    let lg = apply_l_batch(table, grid, &cells, &refs);
    // factor at the resting state so the drift is left to the iteration
    let rest = LocalMaxwellian::new(
        CellState {
            u: [0.0; 3],
            ..test_state(cfg)
        },
        grid,
        table,
    )
    .map_err(numerical)?;
    let pre = Preconditioner::Reference(Arc::new(reference_factor(table, grid, &rest, None).map_err(numerical)?));
    let (u, stats) = solve_batch(table, grid, &cells, &lg, None, &pre, &cfg.solve_options()).map_err(numerical)?;
    let mut worst: f64 = 0.0;
    for (g, x) in gs.iter().zip(&u) {
        let micro = cell.micro_part(grid, g);
        let d: Vec<f64> = x.iter().zip(&micro).map(|(a, b)| a - b).collect();
        worst = worst.max(grid.norm(&d) / grid.norm(&micro));
    }
    let iters = stats.iter().map(|s| s.iterations).max().unwrap_or(0);
    Ok(vec![Check::below(
        5,
        "inverse_round_trip",
        worst,
        thresholds::ROUND_TRIP,
        format!("max over {count} seeded samples; at most {iters} iterations"),
    )])
}

/// Key of everything that determines the backbone.
pub fn backbone_key(cfg: &RunConfig) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        momentum: &'a crate::config::MomentumSection,
        space: &'a crate::config::SpaceSection,
        eta_reg: f64,
        linearized: &'a crate::config::LinearizedSection,
        euler: &'a crate::config::EulerSection,
        hilbert: &'a crate::config::HilbertSection,
    }
    let text = toml::to_string(&Key {
        momentum: &cfg.momentum,
        space: &cfg.space,
        eta_reg: cfg.collision.eta_reg,
        linearized: &cfg.linearized,
        euler: &cfg.euler,
        hilbert: &cfg.hilbert,
    })
    .expect("key serialises");
    use sha2::Digest;
    sha2::Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// One row of `sweep_result.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub t: f64,
    pub h2_norm: f64,
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "D_integral")]
    pub d_integral: f64,
    #[serde(rename = "min_F")]
    pub min_f: f64,
}

pub const SWEEP_HEADER: [&str; 6] = ["epsilon", "t", "h2_norm", "E", "D_integral", "min_F"];

pub fn sweep_rows(runs: &[RunSeries]) -> Vec<SweepRow> {
    runs.iter()
        .flat_map(|r| {
            r.rows.iter().map(move |row| SweepRow {
                epsilon: r.epsilon,
                t: row.t,
                h2_norm: row.h2_norm,
                e: row.e,
                d_integral: row.d_integral,
                min_f: row.min_f,
            })
        })
        .collect()
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::Prerequisite(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<SweepRow>, _>>()
        .map_err(|e| HarnessError::Prerequisite(format!("{}: {e}", path.display())))
}

/// `(ε, sup_t h2)` per run, in file order.
pub fn sup_norms(rows: &[SweepRow]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some((e, s)) if *e == r.epsilon => *s = s.max(r.h2_norm),
            _ => out.push((r.epsilon, r.h2_norm)),
        }
    }
    out
}

pub fn slope_of(rows: &[SweepRow]) -> Option<f64> {
    let sup = sup_norms(rows);
    let (x, y): (Vec<f64>, Vec<f64>) = sup.into_iter().unzip();
    loglog_slope(&x, &y)
}

/// Criteria 7 to 9 from a finished sweep.
pub fn sweep_checks(result: &SweepResult) -> Vec<Check> {
    let slope = result.slope.unwrap_or(f64::NAN);
    let sup: Vec<String> = result.runs.iter().map(|r| format!("{:.4e}", r.sup_h2)).collect();
    let mut out = vec![Check::new(
        7,
        "convergence_slope",
        slope,
        thresholds::SLOPE_LOW,
        (thresholds::SLOPE_LOW..=thresholds::SLOPE_HIGH).contains(&slope),
        format!(
            "target [{}; {}]; sup h2 = {} at epsilon = {:?}",
            thresholds::SLOPE_LOW,
            thresholds::SLOPE_HIGH,
            sup.join(" "),
            result.epsilons
        ),
    )];
    let ratio = result
        .runs
        .iter()
        .zip(&result.halved)
        .map(|(a, b)| {
            let (x, y) = (a.c_fit, b.c_fit);
            if x == 0.0 && y == 0.0 {
                1.0
            } else if x > 0.0 && y > 0.0 {
                x.max(y) / x.min(y)
            } else {
                f64::INFINITY
            }
        })
        .fold(if result.halved.is_empty() { f64::NAN } else { 1.0 }, f64::max);
    let fits: Vec<String> = result
        .runs
        .iter()
        .zip(&result.halved)
        .map(|(a, b)| format!("{:.3e}/{:.3e}", a.c_fit, b.c_fit))
        .collect();
    out.push(Check::new(
        8,
        "energy_c_fit_stability",
        ratio,
        thresholds::C_FIT_FACTOR,
        result.c_fit_stable(),
        if result.halved.is_empty() {
            "needs sweep.dt_halving = true".into()
        } else {
            format!("C_fit at dt / dt/2 = {}", fits.join(" "))
        },
    ));
    let negative = result.runs.iter().chain(&result.halved).filter(|r| !r.d_terms_nonnegative).count();
    out.push(Check::new(
        8,
        "dissipation_terms_nonnegative",
        negative as f64,
        0.0,
        negative == 0,
        "runs with a negative D term".into(),
    ));
    let min0 = result.runs.iter().map(|r| r.min_f_initial).fold(f64::INFINITY, f64::min);
    out.push(Check::new(
        9,
        "positivity_initial",
        min0,
        0.0,
        min0 >= 0.0,
        "min F(0) over the sweep".into(),
    ));
    let rel = result
        .runs
        .iter()
        .chain(&result.halved)
        .map(|r| r.min_f / r.peak_m)
        .fold(f64::INFINITY, f64::min);
    out.push(Check::new(
        9,
        "positivity_run",
        rel,
        thresholds::POSITIVITY,
        rel >= thresholds::POSITIVITY,
        "min F over every run and time / peak of M".into(),
    ));
    out
}

/// Per-run diagnostics written next to the sweep.
#[derive(Debug, Clone, Copy, Serialize)]
struct RunSummaryRow {
    epsilon: f64,
    dt: f64,
    sup_h2: f64,
    max_e: f64,
    min_f: f64,
    min_f_initial: f64,
    peak_m: f64,
    c_fit: f64,
    c_fit_total: f64,
    d_terms_nonnegative: bool,
    conservation_drift: f64,
    macro_conservation: f64,
    macro_comparison: f64,
    md_fit: f64,
}

const RUN_HEADER: [&str; 14] = [
    "epsilon",
    "dt",
    "sup_h2",
    "max_E",
    "min_F",
    "min_F_initial",
    "peak_M",
    "c_fit",
    "c_fit_total",
    "d_terms_nonnegative",
    "conservation_drift",
    "macro_conservation",
    "macro_comparison",
    "md_fit",
];

fn run_summary(r: &RunSeries) -> RunSummaryRow {
    RunSummaryRow {
        epsilon: r.epsilon,
        dt: r.dt,
        sup_h2: r.sup_h2,
        max_e: r.max_e,
        min_f: r.min_f,
        min_f_initial: r.min_f_initial,
        peak_m: r.peak_m,
        c_fit: r.c_fit,
        c_fit_total: r.c_fit_total,
        d_terms_nonnegative: r.d_terms_nonnegative,
        conservation_drift: r.conservation_drift,
        macro_conservation: r.macro_conservation,
        macro_comparison: r.macro_comparison,
        md_fit: r.md_fit,
    }
}

fn plot_error(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Numerical(format!("plot: {e}"))
}

fn log_range(values: impl Iterator<Item = f64>) -> std::ops::Range<f64> {
    let (lo, hi) = values
        .filter(|v| *v > 0.0 && v.is_finite())
        .fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
    if lo > hi {
        return 0.1..1.0;
    }
    lo / 2.0..hi * 2.0
}

/// Log-log plot of `sup_t ‖F - M‖_{H²}` against `ε` with the fitted slope.
pub fn plot_convergence(path: &Path, rows: &[SweepRow]) -> Result<(), HarnessError> {
    let sup = sup_norms(rows);
    let slope = slope_of(rows);
    let root = SVGBackend::new(path, (720, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_error)?;
    let title = match slope {
        Some(s) => format!("sup_t |F - M|_H2 vs epsilon, slope {s:.3}"),
        None => "sup_t |F - M|_H2 vs epsilon".to_string(),
    };
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(
            log_range(sup.iter().map(|p| p.0)).log_scale(),
            log_range(sup.iter().map(|p| p.1)).log_scale(),
        )
        .map_err(plot_error)?;
    chart
        .configure_mesh()
        .x_desc("epsilon")
        .y_desc("sup_t H2 norm")
        .draw()
        .map_err(plot_error)?;
    chart
        .draw_series(sup.iter().map(|&(e, s)| Circle::new((e, s), 5, BLUE.filled())))
        .map_err(plot_error)?
        .label("runs")
        .legend(|(x, y)| Circle::new((x + 10, y), 4, BLUE.filled()));
    if let (Some(s), false) = (slope, sup.is_empty()) {
        let n = sup.len() as f64;
        let mx = sup.iter().map(|p| p.0.ln()).sum::<f64>() / n;
        let my = sup.iter().map(|p| p.1.ln()).sum::<f64>() / n;
        let fit: Vec<(f64, f64)> = sup.iter().map(|&(e, _)| (e, (my + s * (e.ln() - mx)).exp())).collect();
        chart
            .draw_series(LineSeries::new(fit, &RED))
            .map_err(plot_error)?
            .label(format!("fit, slope {s:.3}"))
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], RED));
        let (e0, s0) = sup[0];
        let unit: Vec<(f64, f64)> = sup.iter().map(|&(e, _)| (e, s0 * e / e0)).collect();
        chart
            .draw_series(LineSeries::new(unit, &BLACK.mix(0.4)))
            .map_err(plot_error)?
            .label("slope 1")
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLACK.mix(0.4)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_error)?;
    root.present().map_err(plot_error)
}

/// Time series of one column per `ε` on a log axis.
pub fn plot_series(
    path: &Path,
    rows: &[SweepRow],
    title: &str,
    value: impl Fn(&SweepRow) -> f64,
) -> Result<(), HarnessError> {
    let sup = sup_norms(rows);
    let t_max = rows.iter().map(|r| r.t).fold(0.0, f64::max).max(1e-12);
    let root = SVGBackend::new(path, (720, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_error)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(0.0..t_max, log_range(rows.iter().map(&value)).log_scale())
        .map_err(plot_error)?;
    chart.configure_mesh().x_desc("t").y_desc(title).draw().map_err(plot_error)?;
    for (i, (eps, _)) in sup.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.epsilon == *eps)
            .map(|r| (r.t, value(r)))
            .filter(|p| p.1 > 0.0 && p.1.is_finite())
            .collect();
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(plot_error)?
            .label(format!("epsilon = {eps}"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_error)?;
    root.present().map_err(plot_error)
}

/// Check files of every subcommand, in criterion order.
const CHECK_FILES: [&str; 4] = [
    "kernel_checks.csv",
    "linearized_checks.csv",
    "hierarchy_checks.csv",
    "sweep_checks.csv",
];

const CRITERIA: [(u8, &str, &str); 10] = [
    (1, "kernel identities", "check-kernel"),
    (2, "equilibrium annihilation", "check-kernel"),
    (3, "conservation", "check-kernel"),
    (4, "linearized structure", "check-linearized"),
    (5, "inverse round trip", "check-linearized"),
    (6, "Hilbert hierarchy", "hilbert-build"),
    (7, "convergence rate", "knudsen-sweep"),
    (8, "energy boundedness", "knudsen-sweep"),
    (9, "positivity", "knudsen-sweep"),
    (10, "determinism", "the acceptance suite"),
];

/// Render `summary.md` from whatever check and sweep files exist.
pub fn render_summary(cfg: &RunConfig, dir: &Path) -> Result<String, HarnessError> {
    let mut checks: Vec<Check> = Vec::new();
    for f in CHECK_FILES {
        let p = dir.join(f);
        if p.exists() {
            checks.extend(read_checks(&p)?);
        }
    }
    let mut s = String::new();
    s.push_str("# Run summary\n\n");
    s.push_str(&format!("config hash `{}`, seed {}\n\n", cfg.hash(), cfg.seed));
    s.push_str("| criterion | result | checks |\n|---|---|---|\n");
    for (id, name, source) in CRITERIA {
        let mine: Vec<&Check> = checks.iter().filter(|c| c.criterion == id).collect();
        let result = if mine.is_empty() {
            format!("not run (see {source})")
        } else if mine.iter().all(|c| c.pass) {
            "PASS".to_string()
        } else {
            "FAIL".to_string()
        };
        let names: Vec<&str> = mine.iter().map(|c| c.name.as_str()).collect();
        s.push_str(&format!("| {id}. {name} | {result} | {} |\n", names.join(", ")));
    }
    if !checks.is_empty() {
        s.push_str("\n## Checks\n\n| criterion | check | value | threshold | pass | detail |\n|---|---|---|---|---|---|\n");
        for c in &checks {
            s.push_str(&format!(
                "| {} | {} | {:.6e} | {:e} | {} | {} |\n",
                c.criterion,
                c.name,
                c.value,
                c.threshold,
                if c.pass { "PASS" } else { "FAIL" },
                c.detail.replace('|', "\\|")
            ));
        }
    }
    let sweep = dir.join(SWEEP_FILE);
    if sweep.exists() {
        let rows = read_sweep(&sweep)?;
        s.push_str("\n## Knudsen sweep\n\n| epsilon | sup_t H2 norm |\n|---|---|\n");
        for (e, v) in sup_norms(&rows) {
            s.push_str(&format!("| {e} | {v:.6e} |\n"));
        }
        match slope_of(&rows) {
            Some(v) => s.push_str(&format!(
                "\nfitted log-log slope {v:.6} (acceptance range [{}, {}])\n",
                thresholds::SLOPE_LOW,
                thresholds::SLOPE_HIGH
            )),
            None => s.push_str("\nfitted log-log slope: undefined (degenerate sweep)\n"),
        }
    }
    Ok(s)
}

fn finish(
    cfg: &RunConfig,
    out: &mut Outputs,
    cmd: Subcommand,
    inputs: Vec<String>,
) -> Result<(), HarnessError> {
    let summary = render_summary(cfg, &out.dir)?;
    out.write("summary.md", summary.as_bytes())?;
    let manifest = Manifest {
        subcommand: cmd.name(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        inputs,
        outputs: out.files().to_vec(),
    };
    let text = toml::to_string(&manifest).map_err(numerical)?;
    out.write(&format!("manifest-{}.toml", cmd.name()), text.as_bytes())
}

fn log(msg: impl AsRef<str>) {
    eprintln!("[landau] {}", msg.as_ref());
}

/// Run one subcommand. `Ok` carries the checks it produced.
pub fn run_subcommand(cmd: Subcommand, cfg: &RunConfig) -> Result<Vec<Check>, HarnessError> {
    cfg.validate()?;
    let mut out = Outputs::new(&cfg.output_dir)?;
    out.write("config.toml", cfg.to_toml().as_bytes())?;
    let mut inputs = vec!["config.toml".to_string()];
    let checks = match cmd {
        Subcommand::CheckKernel => {
            let grid = momentum_grid(cfg)?;
            let table = kernel_table(cfg, &grid)?;
            let mut c = kernel_identity_check(cfg);
            c.extend(equilibrium_check(cfg, &grid, &table)?);
            c.extend(conservation_check(cfg, &grid, &table));
            out.write_csv("kernel_checks.csv", &c, &CHECK_HEADER)?;
            c
        }
        Subcommand::CheckLinearized => {
            let grid = momentum_grid(cfg)?;
            let table = kernel_table(cfg, &grid)?;
            let mut c = linearized_structure_check(cfg, &grid, &table)?;
            c.extend(round_trip_check(cfg, &grid, &table)?);
            out.write_csv("linearized_checks.csv", &c, &CHECK_HEADER)?;
            c
        }
        Subcommand::EulerSolve => {
            euler_solve(cfg, &mut out)?;
            Vec::new()
        }
        Subcommand::HilbertBuild => hilbert_build(cfg, &mut out)?,
        Subcommand::KnudsenSweep => {
            inputs.push(BACKBONE_FILE.to_string());
            sweep(cfg, &mut out)?
        }
        Subcommand::Report => {
            inputs.push(SWEEP_FILE.to_string());
            report(&mut out)?;
            Vec::new()
        }
    };
    finish(cfg, &mut out, cmd, inputs)?;
    Ok(checks)
}

#[derive(Serialize)]
struct FluidRow {
    t: f64,
    x: f64,
    n0: f64,
    u1: f64,
    u2: f64,
    u3: f64,
    #[serde(rename = "T0")]
    t0: f64,
}

#[derive(Serialize)]
struct TotalsRow {
    t: f64,
    density: f64,
    momentum_1: f64,
    momentum_2: f64,
    momentum_3: f64,
    energy: f64,
}

fn euler_solve(cfg: &RunConfig, out: &mut Outputs) -> Result<(), HarnessError> {
    let space = spatial_grid(cfg)?;
    let closure = match cfg.euler.closure {
        ClosureKind::Analytic => Closure::Analytic,
        ClosureKind::Lattice => Closure::Lattice(Arc::new(momentum_grid(cfg)?)),
    };
    let mut solver = EulerSolver::new(space, closure, cfg.euler.cfl);
    solver.dissipation = cfg.euler.dissipation;
    let init = solver.initial(&cfg.euler.init()).map_err(numerical)?;
    let every = cfg.euler.output_every;
    let sub = (every / solver.max_dt()).ceil().max(1.0);
    let dt = every / sub;
    let history = solver.run(&init, dt, cfg.euler.t_final).map_err(numerical)?;
    let stride = sub as usize;
    let mut rows = Vec::new();
    let mut totals = Vec::new();
    for st in history.states.iter().step_by(stride) {
        for (i, s) in st.primitive.iter().enumerate() {
            rows.push(FluidRow {
                t: st.t,
                x: space.x(i),
                n0: s.n0,
                u1: s.u[0],
                u2: s.u[1],
                u3: s.u[2],
                t0: s.t0,
            });
        }
        let u = solver.totals(st);
        totals.push(TotalsRow {
            t: st.t,
            density: u[0],
            momentum_1: u[1],
            momentum_2: u[2],
            momentum_3: u[3],
            energy: u[4],
        });
    }
    out.write_csv("fluid.csv", &rows, &["t", "x", "n0", "u1", "u2", "u3", "T0"])?;
    out.write_csv(
        "fluid_totals.csv",
        &totals,
        &["t", "density", "momentum_1", "momentum_2", "momentum_3", "energy"],
    )?;
    let first = &totals[0];
    let last = totals.last().expect("at least the initial state");
    log(format!(
        "euler-solve: {} steps of {dt:.4e}; total energy drift {:.3e}",
        history.states.len() - 1,
        (last.energy - first.energy).abs() / first.energy
    ));
    Ok(())
}

fn hilbert_build(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Check>, HarnessError> {
    let grid = Arc::new(momentum_grid(cfg)?);
    let table = kernel_table(cfg, &grid)?;
    let space = spatial_grid(cfg)?;
    let mut builder = HilbertBuilder::new(&table, grid.clone(), space, cfg.hilbert_config());
    builder.cfl = cfg.euler.cfl;
    builder.dissipation = cfg.euler.dissipation;
    let init = cfg.euler.init();
    let states: Vec<CellState> = (0..space.cells).map(|i| init.state_at(space.x(i), space.length)).collect();
    let hierarchy = builder.build(states).map_err(numerical)?;
    let h2 = space.h() * space.h();
    let limit = h2 + cfg.linearized.cg_tol;
    let mut checks: Vec<Check> = hierarchy
        .residuals(&table)
        .iter()
        .map(|r| {
            Check::below(
                6,
                &format!("hierarchy_residual_order_{}", r.order),
                r.relative,
                limit,
                format!(
                    "relative to the transport terms; limit h^2 + cg_tol{}",
                    if r.projected { "; null-space part" } else { "" }
                ),
            )
        })
        .collect();
    for n in 0..hierarchy.orders.len() {
        let d = hierarchy.decay_check(n);
        checks.push(Check::new(
            6,
            &format!("decay_order_{n}"),
            if d.c_fit > 0.0 { d.c_max / d.c_fit } else { 0.0 },
            2.0,
            d.passes,
            format!(
                "exponent {}; C fitted on the first half {:.3e}; max {:.3e}{}",
                d.exponent,
                d.c_fit,
                d.c_max,
                if d.at_boundary { "; maximum on the box face" } else { "" }
            ),
        ));
    }
    out.write_csv("hierarchy_checks.csv", &checks, &CHECK_HEADER)?;
    let path = out.path(BACKBONE_FILE);
    hierarchy.backbone().save(&path).map_err(|e| HarnessError::Output {
        path: path.clone(),
        source: std::io::Error::other(e.to_string()),
    })?;
    out.record(BACKBONE_FILE);
    out.write(BACKBONE_KEY_FILE, backbone_key(cfg).as_bytes())?;
    Ok(checks)
}

/// Load the backbone written by `hilbert-build` for this configuration.
pub fn load_backbone(cfg: &RunConfig) -> Result<Backbone, HarnessError> {
    let dir = &cfg.output_dir;
    let path = dir.join(BACKBONE_FILE);
    if !path.exists() {
        return Err(HarnessError::Prerequisite(format!(
            "{} not found; run `landau hilbert-build` with this configuration first",
            path.display()
        )));
    }
    let key = std::fs::read_to_string(dir.join(BACKBONE_KEY_FILE)).unwrap_or_default();
    if key.trim() != backbone_key(cfg) {
        return Err(HarnessError::Prerequisite(format!(
            "{} was built for a different configuration; rerun `landau hilbert-build`",
            path.display()
        )));
    }
    Backbone::load(&path).map_err(|e| HarnessError::Prerequisite(format!("{}: {e}", path.display())))
}

/// Context for remainder runs on a loaded backbone.
pub fn solver_context<'a>(
    cfg: &RunConfig,
    table: &'a KernelTable,
    grid: Arc<MomentumGrid>,
    backbone: Arc<Backbone>,
) -> Result<SolverContext<'a>, HarnessError> {
    let max_t0 = backbone
        .euler
        .iter()
        .flat_map(|row| row.iter().map(|w| crate::euler_fluid::state_of(w).t0))
        .fold(0.0, f64::max);
    SolverContext::new(table, grid, backbone, cfg.solver_config(max_t0))
        .map_err(|e| HarnessError::Config(ConfigError::Invalid(e.to_string())))
}

fn write_sweep(out: &mut Outputs, result: &SweepResult) -> Result<Vec<SweepRow>, HarnessError> {
    let rows = sweep_rows(&result.runs);
    out.write_csv(SWEEP_FILE, &rows, &SWEEP_HEADER)?;
    let runs: Vec<RunSummaryRow> = result.runs.iter().chain(&result.halved).map(run_summary).collect();
    out.write_csv("sweep_runs.csv", &runs, &RUN_HEADER)?;
    Ok(rows)
}

fn render_sweep_outputs(out: &mut Outputs, rows: &[SweepRow]) -> Result<(), HarnessError> {
    let slope = match slope_of(rows) {
        Some(s) => format!("{s:e}\n"),
        None => "undefined\n".to_string(),
    };
    out.write("slope.txt", slope.as_bytes())?;
    plot_convergence(&out.path("convergence.svg"), rows)?;
    out.record("convergence.svg");
    plot_series(&out.path("energy.svg"), rows, "E(t)", |r| r.e)?;
    out.record("energy.svg");
    plot_series(&out.path("dissipation.svg"), rows, "integral of D", |r| r.d_integral)?;
    out.record("dissipation.svg");
    Ok(())
}

fn sweep(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Check>, HarnessError> {
    let backbone = Arc::new(load_backbone(cfg)?);
    let grid = Arc::new(momentum_grid(cfg)?);
    let table = kernel_table(cfg, &grid)?;
    let ctx = solver_context(cfg, &table, grid, backbone)?;
    let result = knudsen_sweep(&ctx, &cfg.sweep, |run| {
        log(format!(
            "epsilon {}: sup h2 {:.4e}, min F {:.3e}",
            run.epsilon, run.sup_h2, run.min_f
        ))
    });
    match result {
        Ok(r) => {
            let rows = write_sweep(out, &r)?;
            render_sweep_outputs(out, &rows)?;
            let checks = sweep_checks(&r);
            out.write_csv("sweep_checks.csv", &checks, &CHECK_HEADER)?;
            Ok(checks)
        }
        Err(RemainderError::Sweep { epsilon, partial, source }) => {
            let rows = write_sweep(out, &partial)?;
            render_sweep_outputs(out, &rows)?;
            finish(cfg, out, Subcommand::KnudsenSweep, vec!["config.toml".into(), BACKBONE_FILE.into()])?;
            Err(HarnessError::Numerical(format!(
                "sweep stopped at epsilon = {epsilon}: {source}; partial results written"
            )))
        }
        Err(RemainderError::Config(m)) => Err(HarnessError::Config(ConfigError::Invalid(m))),
        Err(e) => Err(numerical(e)),
    }
}

fn report(out: &mut Outputs) -> Result<(), HarnessError> {
    let path = out.path(SWEEP_FILE);
    if !path.exists() {
        return Err(HarnessError::Prerequisite(format!(
            "{} not found; run `landau knudsen-sweep` first",
            path.display()
        )));
    }
    let rows = read_sweep(&path)?;
    render_sweep_outputs(out, &rows)
}

/// Cap the global worker pool from `LANDAU_THREADS`.
pub fn init_threads() -> Result<(), HarnessError> {
    let Ok(v) = std::env::var("LANDAU_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| HarnessError::Config(ConfigError::Invalid(format!("LANDAU_THREADS = {v:?}"))))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epsilon: f64, t: f64, h2: f64) -> SweepRow {
        SweepRow {
            epsilon,
            t,
            h2_norm: h2,
            e: 1.0,
            d_integral: t,
            min_f: 0.0,
        }
    }

    #[test]
    fn subcommand_names_round_trip() {
        for c in Subcommand::ALL {
            assert_eq!(Subcommand::from_name(c.name()), Some(c));
        }
        assert_eq!(Subcommand::from_name("sweep"), None);
    }

    #[test]
    fn sup_norms_and_slope_from_rows() {
        let mut rows = Vec::new();
        for e in [0.1, 0.05, 0.025] {
            rows.push(row(e, 0.0, 0.5 * e));
            rows.push(row(e, 0.1, 2.0 * e));
        }
        let sup = sup_norms(&rows);
        assert_eq!(sup, vec![(0.1, 0.2), (0.05, 0.1), (0.025, 0.05)]);
        assert!((slope_of(&rows).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(slope_of(&[]), None);
    }

    #[test]
    fn empty_sweep_gives_header_only_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Outputs::new(dir.path()).unwrap();
        write_sweep(&mut out, &SweepResult::default()).unwrap();
        let text = std::fs::read_to_string(dir.path().join(SWEEP_FILE)).unwrap();
        assert_eq!(text, "epsilon,t,h2_norm,E,D_integral,min_F\n");
        assert!(read_sweep(&dir.path().join(SWEEP_FILE)).unwrap().is_empty());
    }

    #[test]
    fn sweep_csv_round_trips_at_full_precision() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Outputs::new(dir.path()).unwrap();
        let rows = vec![row(0.1, 1.0 / 3.0, std::f64::consts::PI * 1e-7)];
        out.write_csv(SWEEP_FILE, &rows, &SWEEP_HEADER).unwrap();
        assert_eq!(read_sweep(&dir.path().join(SWEEP_FILE)).unwrap(), rows);
        assert_eq!(out.files(), [SWEEP_FILE.to_string()]);
    }

    #[test]
    fn plots_carry_series_and_slope() {
        let dir = tempfile::tempdir().unwrap();
        let mut rows = Vec::new();
        for e in [0.1, 0.05, 0.025] {
            for s in 0..5 {
                rows.push(row(e, 0.1 * s as f64, e * (1.0 + s as f64)));
            }
        }
        let p = dir.path().join("c.svg");
        plot_convergence(&p, &rows).unwrap();
        let svg = std::fs::read_to_string(&p).unwrap();
        assert!(svg.contains("slope 1.000"));
        let q = dir.path().join("e.svg");
        plot_series(&q, &rows, "E(t)", |r| r.h2_norm).unwrap();
        let svg = std::fs::read_to_string(&q).unwrap();
        for e in ["0.1", "0.05", "0.025"] {
            assert!(svg.contains(&format!("epsilon = {e}")));
        }
    }

    #[test]
    fn sweep_checks_follow_thresholds() {
        let run = |eps: f64, c_fit: f64| RunSeries {
            epsilon: eps,
            dt: 0.01,
            rows: vec![],
            sup_h2: eps,
            max_e: 1.0,
            min_f: -1e-10,
            min_f_initial: 0.0,
            peak_m: 1.0,
            c_fit,
            c_fit_total: 0.0,
            d_terms_nonnegative: true,
            conservation_drift: 0.0,
            macro_conservation: 0.0,
            macro_comparison: 0.0,
            md_fit: 0.0,
        };
        let mut r = SweepResult {
            epsilons: vec![0.1, 0.05, 0.025],
            runs: vec![run(0.1, 1.0), run(0.05, 1.0), run(0.025, 1.0)],
            halved: vec![run(0.1, 1.5), run(0.05, 1.9), run(0.025, 1.0)],
            slope: Some(1.0),
        };
        let c = sweep_checks(&r);
        assert!(c.iter().all(|c| c.pass), "{c:?}");
        r.halved[1].c_fit = 2.5;
        r.slope = Some(1.5);
        let c = sweep_checks(&r);
        assert!(!c[0].pass && !c[1].pass && c[2].pass);
        r.halved.clear();
        assert!(!sweep_checks(&r)[1].pass);
    }

    #[test]
    fn missing_backbone_is_a_prerequisite_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            output_dir: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        let e = run_subcommand(Subcommand::KnudsenSweep, &cfg).unwrap_err();
        assert_eq!(e.exit_code(), EXIT_PREREQUISITE);
        assert!(e.to_string().contains("hilbert-build"));
        let e = run_subcommand(Subcommand::Report, &cfg).unwrap_err();
        assert_eq!(e.exit_code(), EXIT_PREREQUISITE);
    }

    #[test]
    fn summary_lists_every_criterion() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let s = render_summary(&cfg, dir.path()).unwrap();
        for (id, name, _) in CRITERIA {
            assert!(s.contains(&format!("{id}. {name}")));
        }
        let mut out = Outputs::new(dir.path()).unwrap();
        let checks = vec![Check::below(3, "conservation_mass", 1e-9, 1e-8, "x".into())];
        out.write_csv("kernel_checks.csv", &checks, &CHECK_HEADER).unwrap();
        let s = render_summary(&cfg, dir.path()).unwrap();
        assert!(s.contains("| 3. conservation | PASS |"));
    }
}
