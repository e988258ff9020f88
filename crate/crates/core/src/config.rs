//! Experiment configuration (TOML).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::basis::BasisFamily;
use crate::doob::{DEFAULT_MULTIPLIERS, DEFAULT_TUNING_BATCH};
use crate::error::{Error, Result};
use crate::estimator::Method;
use crate::gedmd::DEFAULT_MSE_THRESHOLD;
use crate::model::{Margin, ObsMode, DEFAULT_SHARPNESS};
use crate::paths::{Scheme, WeightRule};

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "KOOPMAN_IS_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelBlock,
    pub event: EventBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<PointsBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<BasisBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gedmd: Option<GedmdBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doob: Option<DoobBlock>,
    pub run: RunBlock,
    pub output: OutputBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventBlock {
    #[serde(flatten)]
    pub margin: Margin,
    #[serde(default = "default_sharpness")]
    pub sharpness: f64,
    /// Terminal function regressed onto the eigenfunctions.
    #[serde(default = "default_fit")]
    pub fit: ObsMode,
    /// Terminal function averaged by the ensemble.
    #[serde(default)]
    pub estimate: ObsMode,
}

fn default_fit() -> ObsMode {
    ObsMode::Mollified
}

fn default_sharpness() -> f64 {
    DEFAULT_SHARPNESS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PointsBlock {
    /// States along uncontrolled trajectories from a tensor grid of initial conditions.
    Trajectories {
        lower: Vec<f64>,
        upper: Vec<f64>,
        counts: Vec<usize>,
        t_traj: f64,
        stride: f64,
        #[serde(default = "default_points_dt")]
        max_dt: f64,
        seed: u64,
    },
    /// Independent draws from `N(mean, diag(std^2))`.
    Gaussian { mean: Vec<f64>, std: Vec<f64>, count: usize, seed: u64 },
    /// Mode-coefficient snapshots for the spectral SPDE.
    Snapshots {
        amplitudes: Vec<f64>,
        replicates: usize,
        t_traj: f64,
        stride: f64,
        #[serde(default = "default_points_dt")]
        dt: f64,
        seed: u64,
    },
}

fn default_points_dt() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisBlock {
    pub family: BasisFamily,
    pub degree: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GedmdBlock {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Keep only the first `n` validated eigenpairs (never splitting a conjugate pair).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_eigenfunctions: Option<usize>,
}

fn default_threshold() -> f64 {
    DEFAULT_MSE_THRESHOLD
}

impl Default for GedmdBlock {
    fn default() -> Self {
        GedmdBlock { threshold: DEFAULT_MSE_THRESHOLD, max_eigenfunctions: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoobBlock {
    #[serde(default = "default_multipliers")]
    pub multipliers: Vec<f64>,
    #[serde(default = "default_batch")]
    pub tuning_batch: usize,
    #[serde(default = "default_target")]
    pub target: f64,
    /// Fixed multiplier; skips tuning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multiplier: Option<f64>,
    /// Seed of the tuning ensembles (defaults to the run seed plus one).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuning_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<OffsetBlock>,
}

fn default_multipliers() -> Vec<f64> {
    DEFAULT_MULTIPLIERS.to_vec()
}

fn default_batch() -> usize {
    DEFAULT_TUNING_BATCH
}

fn default_target() -> f64 {
    0.5
}

impl Default for DoobBlock {
    fn default() -> Self {
        DoobBlock {
            multipliers: default_multipliers(),
            tuning_batch: default_batch(),
            target: default_target(),
            multiplier: None,
            tuning_seed: None,
            offset: None,
        }
    }
}

/// Calibrates the positivization shift so that the hit fraction at multiplier `c` equals `target`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetBlock {
    pub c: f64,
    pub target: f64,
    pub batch: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    pub seed: u64,
}

fn default_iterations() -> usize {
    30
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    pub method: Method,
    pub samples: usize,
    pub horizon: f64,
    pub dt: f64,
    #[serde(default)]
    pub x0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
    #[serde(default)]
    pub weight_rule: WeightRule,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    /// Relative paths resolve against the output root (`KOOPMAN_IS_OUT` or the working directory).
    pub dir: PathBuf,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram_range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectories: Option<TrajectoryOutput>,
}

fn default_bins() -> usize {
    50
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryOutput {
    pub count: usize,
    /// Record every `stride`-th step.
    pub stride: usize,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn is_spde(&self) -> bool {
        self.model.name == "advdiff"
    }

    /// Checks block presence and value ranges that do not need the model.
    pub fn validate(&self) -> Result<()> {
        let r = &self.run;
        if r.samples < 2 {
            return Err(Error::Config(format!("run.samples must be at least 2, got {}", r.samples)));
        }
        if !(r.horizon > 0.0 && r.dt > 0.0 && r.dt <= r.horizon) {
            return Err(Error::Config(format!("need 0 < run.dt <= run.horizon, got dt = {}, horizon = {}", r.dt, r.horizon)));
        }
        if self.output.histogram_bins == 0 {
            return Err(Error::Config("output.histogram_bins must be at least 1".into()));
        }
        if !(self.event.sharpness > 0.0) {
            return Err(Error::Config("event.sharpness must be positive".into()));
        }
        if r.method == Method::Is {
            if self.points.is_none() {
                return Err(Error::Config("method = \"is\" needs a [points] block".into()));
            }
            if !self.is_spde() && self.basis.is_none() {
                return Err(Error::Config("method = \"is\" needs a [basis] block".into()));
            }
        }
        if let Some(d) = &self.doob {
            if d.multipliers.iter().any(|c| *c < 1.0) || d.multiplier.is_some_and(|c| c < 1.0) {
                return Err(Error::Config("multipliers must be at least 1".into()));
            }
            if !(0.0 < d.target && d.target < 1.0) {
                return Err(Error::Config(format!("doob.target must lie in (0, 1), got {}", d.target)));
            }
        }
        match (&self.points, self.is_spde()) {
            (Some(PointsBlock::Snapshots { .. }), false) => Err(Error::Config("snapshot points apply to the advdiff model only".into())),
            (Some(p), true) if !matches!(p, PointsBlock::Snapshots { .. }) => Err(Error::Config("advdiff needs kind = \"snapshots\" points".into())),
            _ => Ok(()),
        }
    }
}

/// Output root: `KOOPMAN_IS_OUT` when set, else the working directory.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}
