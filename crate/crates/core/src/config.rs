//! Run configuration: one TOML file with one section per pipeline stage.
//! Unknown keys are rejected; every key has a default, so an empty file is
//! a valid configuration.

use crate::euler_fluid::EulerInit;
use crate::hilbert_expansion::HilbertConfig;
use crate::linearized::SolveOptions;
use crate::phase_space::MomentumGridConfig;
use crate::remainder_solver::{SolverConfig, SweepConfig, TransportScheme};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentumSection {
    pub radius: f64,
    pub points_per_axis: usize,
}

impl Default for MomentumSection {
    fn default() -> Self {
        Self {
            radius: 3.5,
            points_per_axis: 12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceSection {
    pub cells: usize,
    pub length: f64,
}

impl Default for SpaceSection {
    fn default() -> Self {
        Self {
            cells: 16,
            length: 2.0 * std::f64::consts::PI,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollisionSection {
    /// regularisation length as a fraction of the momentum spacing
    pub eta_reg: f64,
    /// directory for cached kernel tables
    pub table_cache_path: Option<PathBuf>,
}

impl Default for CollisionSection {
    fn default() -> Self {
        Self {
            eta_reg: 1e-3,
            table_cache_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearizedSection {
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub ortho_tol: f64,
}

impl Default for LinearizedSection {
    fn default() -> Self {
        let s = SolveOptions::default();
        Self {
            cg_tol: s.tol,
            cg_max_iter: s.max_iter,
            ortho_tol: s.ortho_tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsSection {
    #[serde(rename = "N0")]
    pub n0: u32,
    /// weight temperature as a multiple of the largest backbone `T0`
    #[serde(rename = "T_margin")]
    pub t_margin: f64,
}

impl Default for WeightsSection {
    fn default() -> Self {
        Self { n0: 3, t_margin: 1.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClosureKind {
    Lattice,
    Analytic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EulerSection {
    pub density: f64,
    pub temperature: f64,
    pub amplitude: f64,
    pub mode: usize,
    pub cfl: f64,
    pub dissipation: f64,
    pub t_final: f64,
    /// closure used by `euler-solve`; the hierarchy always uses the lattice one
    pub closure: ClosureKind,
    /// snapshot spacing of the fluid CSV written by `euler-solve`
    pub output_every: f64,
}

impl Default for EulerSection {
    fn default() -> Self {
        Self {
            density: 1.0,
            temperature: 0.2,
            amplitude: 1e-3,
            mode: 1,
            cfl: 0.4,
            dissipation: 0.01,
            t_final: 0.5,
            closure: ClosureKind::Lattice,
            output_every: 0.05,
        }
    }
}

impl EulerSection {
    pub fn init(&self) -> EulerInit {
        EulerInit {
            density: self.density,
            temperature: self.temperature,
            amplitude: self.amplitude,
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HilbertSection {
    pub k: usize,
    pub decay_exponent: f64,
    pub snapshot_dt: f64,
    pub substeps: usize,
}

impl Default for HilbertSection {
    fn default() -> Self {
        let h = HilbertConfig::default();
        Self {
            k: h.k,
            decay_exponent: h.decay_exponent,
            snapshot_dt: h.snapshot_dt,
            substeps: h.substeps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub dt: f64,
    pub t_final: f64,
    pub imex_order: u8,
    pub dt_cap: f64,
    pub transport: TransportScheme,
    pub tau: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolverConfig::default();
        Self {
            dt: s.dt,
            t_final: s.t_final,
            imex_order: s.imex_order,
            dt_cap: s.dt_cap,
            transport: s.transport,
            tau: s.tau,
        }
    }
}

/// Sample counts of the property suites.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChecksSection {
    pub kernel_pairs: usize,
    pub coercivity_samples: usize,
    pub roundtrip_samples: usize,
    /// axis points of the second grid in the coercivity comparison
    pub coercivity_points: usize,
}

impl Default for ChecksSection {
    fn default() -> Self {
        Self {
            kernel_pairs: 10_000,
            coercivity_samples: 200,
            roundtrip_samples: 50,
            coercivity_points: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub momentum: MomentumSection,
    pub space: SpaceSection,
    pub collision: CollisionSection,
    pub linearized: LinearizedSection,
    pub weights: WeightsSection,
    pub euler: EulerSection,
    pub hilbert: HilbertSection,
    pub solver: SolverSection,
    pub sweep: SweepConfig,
    pub checks: ChecksSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 20240601,
            output_dir: PathBuf::from("out"),
            momentum: MomentumSection::default(),
            space: SpaceSection::default(),
            collision: CollisionSection::default(),
            linearized: LinearizedSection::default(),
            weights: WeightsSection::default(),
            euler: EulerSection::default(),
            hilbert: HilbertSection::default(),
            solver: SolverSection::default(),
            sweep: SweepConfig::default(),
            checks: ChecksSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Canonical serialisation; the hash and the manifest use this form.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    /// Digest of the canonical text, leaving out `output_dir`: the same run
    /// written elsewhere keeps its hash.
    pub fn hash(&self) -> String {
        let located = Self {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        let digest = Sha256::digest(located.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn momentum_grid(&self) -> MomentumGridConfig {
        MomentumGridConfig {
            radius: self.momentum.radius,
            points_per_axis: self.momentum.points_per_axis,
        }
    }

    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            tol: self.linearized.cg_tol,
            max_iter: self.linearized.cg_max_iter,
            ortho_tol: self.linearized.ortho_tol,
        }
    }

    pub fn hilbert_config(&self) -> HilbertConfig {
        HilbertConfig {
            k: self.hilbert.k,
            decay_exponent: self.hilbert.decay_exponent,
            snapshot_dt: self.hilbert.snapshot_dt,
            substeps: self.hilbert.substeps,
            t_final: self.euler.t_final,
            solve: self.solve_options(),
        }
    }

    /// Solver settings; the weight temperature is `T_margin · max_t0`.
    pub fn solver_config(&self, max_t0: f64) -> SolverConfig {
        SolverConfig {
            dt: self.solver.dt,
            t_final: self.solver.t_final,
            imex_order: self.solver.imex_order,
            dt_cap: self.solver.dt_cap,
            transport: self.solver.transport,
            collisionless: false,
            tau: self.solver.tau,
            weight_n0: self.weights.n0,
            weight_temperature: self.weights.t_margin * max_t0,
            solve: self.solve_options(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.seed > i64::MAX as u64 {
            return bad("seed must fit a TOML integer (at most 2^63 - 1)");
        }
        let m = &self.momentum;
        if !(m.radius > 0.0) || m.points_per_axis < 8 || !m.points_per_axis.is_multiple_of(2) {
            return bad("momentum: radius must be positive and points_per_axis an even number >= 8");
        }
        if self.space.cells < 8 || !(self.space.length > 0.0) {
            return bad("space: need at least 8 cells and a positive length");
        }
        if !(self.collision.eta_reg > 0.0) {
            return bad("collision.eta_reg must be positive");
        }
        let l = &self.linearized;
        if !(l.cg_tol > 0.0) || l.cg_max_iter == 0 || !(l.ortho_tol > 0.0) {
            return bad("linearized: tolerances and iteration cap must be positive");
        }
        if self.weights.n0 < 3 {
            return bad("weights.N0 must be at least 3");
        }
        if !(self.weights.t_margin >= 1.0) {
            return bad("weights.T_margin must be at least 1");
        }
        let e = &self.euler;
        if !(e.density > 0.0) || !(0.1..=1.2).contains(&e.temperature) {
            return bad("euler: density must be positive and temperature within [0.1, 1.2]");
        }
        if !(e.amplitude >= 0.0 && e.amplitude <= 1e-2) {
            return bad("euler.amplitude must lie in [0, 1e-2]");
        }
        if !(e.cfl > 0.0 && e.cfl <= 1.0) || !(e.t_final > 0.0) || !(e.output_every > 0.0) {
            return bad("euler: cfl in (0, 1], positive t_final and output_every");
        }
        self.hilbert_config().validate().map_err(|err| match err {
            crate::hilbert_expansion::HilbertError::Config(m) => ConfigError::Invalid(format!("hilbert: {m}")),
            other => ConfigError::Invalid(other.to_string()),
        })?;
        if self.solver.t_final > self.euler.t_final * (1.0 + 1e-12) {
            return bad("solver.t_final must not exceed euler.t_final");
        }
        let space = crate::phase_space::SpatialGrid::new(self.space.cells, self.space.length)
            .map_err(|err| ConfigError::Invalid(err.to_string()))?;
        self.solver_config(self.euler.temperature)
            .validate(&space)
            .map_err(|err| ConfigError::Invalid(err.to_string()))?;
        self.sweep
            .validate()
            .map_err(|err| ConfigError::Invalid(err.to_string()))?;
        let c = &self.checks;
        if c.kernel_pairs == 0 || c.coercivity_samples == 0 || c.roundtrip_samples == 0 {
            return bad("checks: sample counts must be positive");
        }
        if !c.coercivity_points.is_multiple_of(2) || c.coercivity_points == self.momentum.points_per_axis {
            return bad("checks.coercivity_points must be even and differ from the main grid");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[solver]\nbogus = 1").is_err());
        assert!(RunConfig::from_toml("[weights]\nn0 = 3").is_err());
    }

    #[test]
    fn section_keys_parse() {
        let c = RunConfig::from_toml(
            "seed = 7\n[weights]\nN0 = 4\nT_margin = 1.2\n[sweep]\nepsilons = [0.2, 0.1, 0.05]\n[solver]\ntransport = \"upwind1\"",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.weights.n0, 4);
        assert_eq!(c.sweep.epsilons, vec![0.2, 0.1, 0.05]);
        assert_eq!(c.solver.transport, TransportScheme::Upwind1);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for bad in [
            "[momentum]\npoints_per_axis = 7",
            "[weights]\nN0 = 2",
            "[solver]\ndt = 0.5",
            "[solver]\nt_final = 1.0",
            "[sweep]\nepsilons = [0.1, 0.2, 0.05]",
            "[euler]\namplitude = 0.5",
        ] {
            assert!(matches!(RunConfig::from_toml(bad), Err(ConfigError::Invalid(_))), "{bad}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        let back = RunConfig::from_toml(&a.to_toml()).unwrap();
        assert_eq!(back, a);
    }
}
