//! Run configuration: a TOML file with dotted sections.
//!
//! ```toml
//! dim = 3
//! seed = 42
//!
//! [kernel]
//! kind = "CauchyPD"
//! epsilon = 0.05
//! alpha = 3.0
//!
//! [grid]
//! L = 4.0
//! m = 16
//!
//! [sim]
//! n = 200
//! T = 4.0
//! ```
//!
//! Every key is optional; missing keys take the values of
//! [`Config::default`]. Unknown keys are rejected.

use crate::duals::{BoundFns, PathConfig};
use crate::environment::{GridSpec, DEFAULT_MAX_CELLS};
use crate::error::{Error, Result};
use crate::kernels::{CorrelationKernel, KernelKind};
use crate::particles::{BoundaryPolicy, DEFAULT_MAX_PARTICLES};
use crate::spde::SolverOptions;
use crate::testfn::{TestFnKind, TestFunction};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub dim: usize,
    /// Master seed; every stream in a run is derived from it.
    #[serde(with = "seed_repr")]
    pub seed: u64,
    /// Worker threads, 0 for one per core.
    pub threads: usize,
    pub kernel: KernelSection,
    pub grid: GridSection,
    pub sim: SimSection,
    pub phi: PhiSection,
    pub caps: CapsSection,
    pub bounds: BoundsSection,
    pub duals: DualsSection,
    pub experiment: ExperimentSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSection {
    pub kind: KernelKind,
    pub epsilon: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Half width of the box `[-L, L]^d`.
    #[serde(rename = "L")]
    pub half_width: f64,
    /// Cells per axis.
    pub m: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    /// Particles per unit initial mass; the particle step is `1/n`.
    pub n: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    /// Step of field and solvers. Defaults to `1/n` so that particles and
    /// solvers read the same increments.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub snapshot_times: Vec<f64>,
    pub boundary: BoundaryPolicy,
    /// Safety factor on the explicit-scheme limit `h²/d`.
    pub c_stab: f64,
    /// Write the noise increments as binary records next to the CSV output.
    pub record_noise: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhiSection {
    pub kind: TestFnKind,
    pub radius: f64,
    pub amplitude: f64,
    /// Defaults to the origin.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapsSection {
    pub max_particles: usize,
    pub max_cells: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsSection {
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualsSection {
    pub n_paths: usize,
    pub dt_path: f64,
    /// Truncation horizon of the exponential moment.
    pub horizon: f64,
    /// Number of `(t, x, y)` tuples in the factorization check.
    pub tuples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Lln,
    Clt,
    Prop,
    Moments,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub mode: Mode,
    pub horizons: Vec<f64>,
    /// Independent environment realizations.
    pub n_fields: usize,
    /// Particle clouds per environment.
    pub n_clouds: usize,
    /// Significance level of the normality tests, before Bonferroni.
    pub ks_level: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            dim: 3,
            seed: 42,
            threads: 0,
            kernel: KernelSection::default(),
            grid: GridSection::default(),
            sim: SimSection::default(),
            phi: PhiSection::default(),
            caps: CapsSection::default(),
            bounds: BoundsSection::default(),
            duals: DualsSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

impl Default for KernelSection {
    fn default() -> Self {
        KernelSection {
            kind: KernelKind::CauchyPD,
            epsilon: 0.05,
            alpha: 3.0,
        }
    }
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { half_width: 4.0, m: 16 }
    }
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            n: 200,
            horizon: 4.0,
            dt: None,
            snapshot_times: Vec::new(),
            boundary: BoundaryPolicy::Reflect,
            c_stab: 1.0,
            record_noise: false,
        }
    }
}

impl Default for PhiSection {
    fn default() -> Self {
        PhiSection {
            kind: TestFnKind::TruncGauss,
            radius: 3.0,
            amplitude: 1.0,
            center: None,
        }
    }
}

impl Default for CapsSection {
    fn default() -> Self {
        CapsSection {
            max_particles: DEFAULT_MAX_PARTICLES,
            max_cells: DEFAULT_MAX_CELLS,
        }
    }
}

impl Default for BoundsSection {
    fn default() -> Self {
        BoundsSection { p: 1.05 }
    }
}

impl Default for DualsSection {
    fn default() -> Self {
        DualsSection {
            n_paths: 20_000,
            dt_path: 0.01,
            horizon: 20_000.0,
            tuples: 10,
        }
    }
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            mode: Mode::Lln,
            horizons: vec![4.0, 8.0, 16.0],
            n_fields: 8,
            n_clouds: 4,
            ks_level: 0.01,
        }
    }
}

/// TOML integers are signed 64-bit, so seeds above `i64::MAX` are written as
/// decimal strings. Either form is accepted on input.
pub mod seed_repr {
    use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(seed: &u64, s: S) -> Result<S::Ok, S::Error> {
        match i64::try_from(*seed) {
            Ok(v) => v.serialize(s),
            Err(_) => seed.to_string().serialize(s),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Int(i64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Int(v) => u64::try_from(v).map_err(|_| de::Error::custom(format!("seed must be nonnegative, got {v}"))),
            Repr::Text(t) => t.parse().map_err(|_| de::Error::custom(format!("seed must be a u64, got {t:?}"))),
        }
    }
}

fn bad(key: &str, reason: impl Into<String>) -> Error {
    Error::Config(format!("`{key}` {}", reason.into()))
}

/// Parses and validates a configuration file. Returns the configuration and
/// any warnings.
pub fn parse_config(path: impl AsRef<Path>) -> Result<(Config, Vec<String>)> {
    let text = std::fs::read_to_string(path.as_ref())?;
    Config::from_toml(&text)
}

impl Config {
    pub fn from_toml(text: &str) -> Result<(Config, Vec<String>)> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let warnings = cfg.validate()?;
        Ok((cfg, warnings))
    }

    /// Canonical TOML text; parsing it gives back an equal value.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of [`Config::to_toml`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks every key against its range. Returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warn = Vec::new();
        if self.dim < 3 {
            return Err(bad("dim", format!("= {} must be >= 3 (the theory assumes d >= 3)", self.dim)));
        }
        let k = &self.kernel;
        if !(k.epsilon >= 0.0 && k.epsilon.is_finite()) {
            return Err(bad("kernel.epsilon", format!("= {} must be >= 0", k.epsilon)));
        }
        if !(k.alpha > 2.0) {
            return Err(bad(
                "kernel.alpha",
                format!("= {} must be > 2 (standing assumption alpha > 2)", k.alpha),
            ));
        }
        match k.kind {
            KernelKind::Custom => return Err(bad("kernel.kind", "Custom kernels can only be built in code")),
            KernelKind::PowerCapped => warn.push(
                "kernel.kind = PowerCapped is not positive definite; field sampling may clip eigenvalues".into(),
            ),
            _ => {}
        }
        if !(self.grid.half_width > 0.0 && self.grid.half_width.is_finite()) {
            return Err(bad("grid.L", "must be positive"));
        }
        if self.grid.m == 0 {
            return Err(bad("grid.m", "must be >= 1"));
        }
        let s = &self.sim;
        if s.n == 0 {
            return Err(bad("sim.n", "must be >= 1"));
        }
        if !(s.horizon > 0.0 && s.horizon.is_finite()) {
            return Err(bad("sim.T", "must be positive"));
        }
        if let Some(dt) = s.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(bad("sim.dt", "must be positive"));
            }
            if (dt - 1.0 / s.n as f64).abs() > 1e-12 * dt {
                warn.push(format!(
                    "sim.dt = {dt} differs from 1/sim.n; particle runs need the two to agree"
                ));
            }
        }
        if s.snapshot_times.iter().any(|&t| !(t >= 0.0 && t <= s.horizon)) {
            return Err(bad("sim.snapshot_times", "entries must lie in [0, sim.T]"));
        }
        if !(s.c_stab > 0.0 && s.c_stab <= 1.0) {
            return Err(bad("sim.c_stab", format!("= {} must lie in (0, 1]", s.c_stab)));
        }
        let f = &self.phi;
        if !(f.radius > 0.0) {
            return Err(bad("phi.radius", "must be positive"));
        }
        if !(f.amplitude > 0.0) {
            return Err(bad("phi.amplitude", "must be positive"));
        }
        if let Some(c) = &f.center {
            if c.len() != self.dim {
                return Err(bad("phi.center", format!("needs {} coordinates", self.dim)));
            }
        }
        if self.caps.max_particles == 0 || self.caps.max_cells == 0 {
            return Err(bad("caps", "caps must be positive"));
        }
        let p = self.bounds.p;
        if !(p > 1.0 && p < 10.0 / 9.0) {
            return Err(bad("bounds.p", format!("= {p} must lie in (1, 10/9)")));
        }
        let d = &self.duals;
        if d.n_paths == 0 {
            return Err(bad("duals.n_paths", "must be >= 1"));
        }
        if !(d.dt_path > 0.0) || !(d.horizon > 0.0) {
            return Err(bad("duals", "dt_path and horizon must be positive"));
        }
        let e = &self.experiment;
        if e.horizons.is_empty() || e.horizons.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(bad("experiment.horizons", "needs at least one positive time"));
        }
        if e.n_fields == 0 || e.n_clouds == 0 {
            return Err(bad("experiment", "n_fields and n_clouds must be >= 1"));
        }
        if !(e.ks_level > 0.0 && e.ks_level < 1.0) {
            return Err(bad("experiment.ks_level", "must lie in (0, 1)"));
        }
        Ok(warn)
    }

    pub fn kernel(&self) -> Result<CorrelationKernel> {
        if self.kernel.kind == KernelKind::Zero {
            return Ok(CorrelationKernel::zero(self.dim));
        }
        CorrelationKernel::new(self.kernel.kind, self.kernel.epsilon, self.kernel.alpha, self.dim)
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.dim, self.grid.half_width, self.grid.m)
    }

    pub fn phi(&self) -> Result<TestFunction> {
        let center = self.phi.center.clone().unwrap_or_else(|| vec![0.0; self.dim]);
        TestFunction::new(self.phi.kind, center, self.phi.radius, self.phi.amplitude)
    }

    /// Field and solver step.
    pub fn dt(&self) -> f64 {
        self.sim.dt.unwrap_or(1.0 / self.sim.n as f64)
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            c_stab: self.sim.c_stab,
            ..SolverOptions::default()
        }
    }

    pub fn path_config(&self) -> PathConfig {
        PathConfig {
            n_paths: self.duals.n_paths,
            dt_path: self.duals.dt_path,
            seed: self.seed,
        }
    }

    /// Bounding-function parameters, with `K` read from the test function.
    pub fn bound_fns(&self) -> Result<BoundFns> {
        BoundFns::new(self.bounds.p, self.phi.radius, self.dim, self.kernel.alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let (c, w) = Config::from_toml("").unwrap();
        assert_eq!(c, Config::default());
        assert!(w.is_empty());
        assert_eq!(c.dt(), 1.0 / 200.0);
    }

    #[test]
    fn alpha_two_is_rejected_with_the_key() {
        let e = Config::from_toml("[kernel]\nalpha = 2.0\n").unwrap_err().to_string();
        assert!(e.contains("kernel.alpha") && e.contains("> 2"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_toml("[grid]\nL = 2.0\nwidth = 3\n").is_err());
        assert!(Config::from_toml("colour = 1\n").is_err());
    }

    #[test]
    fn large_seeds_survive_toml() {
        let mut c = Config::default();
        c.seed = u64::MAX;
        assert!(c.to_toml().contains("seed = \"18446744073709551615\""));
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap().0, c);
        assert_eq!(Config::from_toml("seed = 7\n").unwrap().0.seed, 7);
        assert!(Config::from_toml("seed = -1\n").is_err());
    }

    #[test]
    fn power_capped_warns() {
        let (_, w) = Config::from_toml("[kernel]\nkind = \"PowerCapped\"\n").unwrap();
        assert!(w.iter().any(|s| s.contains("clip")));
    }

    #[test]
    fn ranges_name_the_key() {
        for (text, key) in [
            ("dim = 2", "dim"),
            ("[kernel]\nepsilon = -1.0", "kernel.epsilon"),
            ("[bounds]\np = 1.2", "bounds.p"),
            ("[sim]\nn = 0", "sim.n"),
        ] {
            let e = Config::from_toml(text).unwrap_err().to_string();
            assert!(e.contains(key), "{text}: {e}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
