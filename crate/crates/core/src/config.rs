//! Experiment description files.
//!
//! Experiments are TOML documents. Every variant is an internally tagged table
//! with a `kind` key; every random quantity draws from a named seed. A minimal
//! file:
//!
//! ```toml
//! [grid]
//! dim = 1
//! n = 32
//!
//! [time]
//! final_time = 0.1
//! n_steps = 50
//!
//! [truth]
//! kind = "sine_modes"
//! modes = [{ index = [1], amplitude = 1.0 }]
//!
//! [observations]
//! placement = { kind = "uniform", per_axis = 4 }
//! ```
//!
//! Relative file paths inside the document are resolved against the
//! directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assimilation::{ConstraintSpec, Covariance, MarginMode};
use crate::error::{Error, Result};
use crate::forward::{Nonlinearity, TimeGrid};
use crate::grid::{DiffusionField, Grid};
use crate::optimizer::{OptimConfig, SscConfig};
use crate::sparse::SolverKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub dim: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    pub final_time: f64,
    pub n_steps: usize,
    #[serde(default)]
    pub solver: SolverKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SineMode {
    /// Wave number per axis, each `>= 1`.
    pub index: Vec<u32>,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianBump {
    pub center: Vec<f64>,
    pub width: f64,
    pub amplitude: f64,
}

/// The true initial condition of a twin experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TruthSpec {
    /// `sum_m a_m prod_i sin(k_i pi x_i)`
    SineModes { modes: Vec<SineMode> },
    /// `sum_m a_m exp(-|x - c_m|^2 / (2 w_m^2))`, sampled at interior nodes
    Gaussian { bumps: Vec<GaussianBump> },
    /// Nodal values read from a control CSV (last column).
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Placement {
    /// Points in `(0,1)^dim`, snapped to the nearest interior node.
    Coordinates { points: Vec<Vec<f64>> },
    /// Tensor lattice `(i / (per_axis + 1))`, snapped.
    Uniform { per_axis: usize },
    /// Every interior node.
    All,
    /// `count` distinct nodes drawn with `observations.placement_seed`.
    Random { count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSection {
    pub placement: Placement,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    /// Seed of the observation noise.
    #[serde(default)]
    pub seed: u64,
    /// Seed of random placement.
    #[serde(default)]
    pub placement_seed: u64,
}

fn one() -> usize {
    1
}

/// A control derived from the truth: background state or optimizer start.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlSpec {
    Truth,
    #[default]
    Zero,
    /// Truth plus i.i.d. `N(0, sigma^2)` nodal noise.
    Perturbed {
        sigma: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SscSection {
    pub enabled: bool,
    pub directions: usize,
    pub seed: u64,
    pub margin_mode: MarginMode,
    pub dense_check: bool,
    /// Radii of the quadratic-growth probe; empty disables it.
    pub growth_radii: Vec<f64>,
    /// Number of cone directions used by the growth probe.
    pub growth_directions: usize,
}

impl Default for SscSection {
    fn default() -> Self {
        let base = SscConfig::default();
        Self {
            enabled: false,
            directions: base.directions,
            seed: base.seed,
            margin_mode: base.margin_mode,
            dense_check: base.dense_check,
            growth_radii: Vec::new(),
            growth_directions: 8,
        }
    }
}

impl SscSection {
    pub fn ssc_config(&self) -> SscConfig {
        SscConfig {
            directions: self.directions,
            seed: self.seed,
            margin_mode: self.margin_mode,
            dense_check: self.dense_check,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridSection,
    pub time: TimeSection,
    #[serde(default = "unit_diffusion")]
    pub diffusion: DiffusionField,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    pub truth: TruthSpec,
    pub observations: ObservationSection,
    #[serde(default)]
    pub covariance: Covariance,
    #[serde(default = "truth_background")]
    pub background: ControlSpec,
    #[serde(default)]
    pub start: ControlSpec,
    #[serde(default)]
    pub constraint: ConstraintSpec,
    #[serde(default)]
    pub optimizer: OptimConfig,
    #[serde(default)]
    pub ssc: SscSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn unit_diffusion() -> DiffusionField {
    DiffusionField::constant(1.0)
}

fn truth_background() -> ControlSpec {
    ControlSpec::Truth
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigParse(e.message().to_string()))
    }

    /// Reads and parses `path`; relative paths in the document are resolved
    /// against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::ConfigNotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let TruthSpec::File { path } = &mut self.truth {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Replaces every named seed with one derived from `seed`: noise `s`,
    /// background `s+1`, directions `s+2`, placement `s+3`, start `s+4`.
    pub fn override_seed(&mut self, seed: u64) {
        self.observations.seed = seed;
        if let ControlSpec::Perturbed { seed: s, .. } = &mut self.background {
            *s = seed.wrapping_add(1);
        }
        self.ssc.seed = seed.wrapping_add(2);
        self.observations.placement_seed = seed.wrapping_add(3);
        if let ControlSpec::Perturbed { seed: s, .. } = &mut self.start {
            *s = seed.wrapping_add(4);
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.grid.dim, self.grid.n)
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.time.final_time, self.time.n_steps)
    }

    /// Checks every section and cross-reference without doing numerical work.
    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        let dim = grid.dim();
        self.time_grid()?;
        self.diffusion.validate(&grid)?;
        self.nonlinearity.validate()?;

        match &self.truth {
            TruthSpec::SineModes { modes } => {
                if modes.is_empty() {
                    return Err(Error::Config("truth needs at least one sine mode".into()));
                }
                for m in modes {
                    check_dim("sine mode index", dim, m.index.len())?;
                    if m.index.contains(&0) || !m.amplitude.is_finite() {
                        return Err(Error::Config(
                            "sine mode indices must be >= 1 with finite amplitude".into(),
                        ));
                    }
                }
            }
            TruthSpec::Gaussian { bumps } => {
                if bumps.is_empty() {
                    return Err(Error::Config(
                        "truth needs at least one gaussian bump".into(),
                    ));
                }
                for b in bumps {
                    check_dim("gaussian center", dim, b.center.len())?;
                    if !(b.width > 0.0) || !b.amplitude.is_finite() {
                        return Err(Error::Config(
                            "gaussian bumps need positive width and finite amplitude".into(),
                        ));
                    }
                }
            }
            TruthSpec::File { .. } => {}
        }

        let obs = &self.observations;
        if obs.stride == 0 {
            return Err(Error::Config("observation stride must be positive".into()));
        }
        if obs.stride > self.time.n_steps {
            return Err(Error::Config(format!(
                "observation stride {} exceeds n_steps {}",
                obs.stride, self.time.n_steps
            )));
        }
        if !(obs.noise_sigma >= 0.0) || !obs.noise_sigma.is_finite() {
            return Err(Error::Config(format!(
                "noise sigma must be finite and >= 0, got {}",
                obs.noise_sigma
            )));
        }
        match &obs.placement {
            Placement::Coordinates { points } => {
                if points.is_empty() {
                    return Err(Error::Config("no observation points".into()));
                }
                for p in points {
                    grid.snap(p)?;
                }
            }
            Placement::Uniform { per_axis } => {
                if *per_axis == 0 {
                    return Err(Error::Config(
                        "uniform placement needs per_axis >= 1".into(),
                    ));
                }
            }
            Placement::All => {}
            Placement::Random { count } => {
                if *count == 0 || *count > grid.node_count() {
                    return Err(Error::Config(format!(
                        "random placement count {count} must lie in [1, {}]",
                        grid.node_count()
                    )));
                }
            }
        }

        self.covariance.validate(&grid)?;
        for c in [&self.background, &self.start] {
            if let ControlSpec::Perturbed { sigma, .. } = c {
                if !(*sigma >= 0.0) || !sigma.is_finite() {
                    return Err(Error::Config(format!(
                        "perturbation sigma must be finite and >= 0, got {sigma}"
                    )));
                }
            }
        }
        self.constraint.validate(dim)?;
        self.optimizer.validate()?;
        if self.ssc.enabled {
            if self.ssc.directions == 0 {
                return Err(Error::Config("ssc needs at least one direction".into()));
            }
            if self.ssc.growth_radii.iter().any(|r| !(*r > 0.0)) {
                return Err(Error::Config("growth radii must be positive".into()));
            }
        }
        Ok(())
    }
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    crate::error::check_len(what, expected, got)
}

/// Built-in experiments, addressable by name from the command line.
pub const PRESETS: &[(&str, &str)] = &[
    ("small_linear", include_str!("../configs/small_linear.toml")),
    (
        "small_semilinear",
        include_str!("../configs/small_semilinear.toml"),
    ),
    (
        "heat_analytic",
        include_str!("../configs/heat_analytic.toml"),
    ),
    (
        "second_order_2d",
        include_str!("../configs/second_order_2d.toml"),
    ),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}
