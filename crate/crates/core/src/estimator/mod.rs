//! Monte Carlo and importance-sampling ensembles with deterministic reductions.

mod bound;
mod oracle;

pub use bound::{second_moment_bound, MomentBound};
pub use oracle::{
    analytic_oracles, gaussian_event_probability, linear_terminal_law, norm_tail_tilted, polar_norm_tail_2d, ExactOuDoob, GaussianLaw, Oracle,
    OracleValue,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::KahanSum;
use crate::model::{EventObservable, SdeModel};
use crate::paths::{derive_path_rng, simulate_path, Control, NoControl, NoiseStream, PathResult, PathSetup, Scheme, TimeGrid, WeightRule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mc,
    Is,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Mc => "mc",
            Method::Is => "is",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub method: Method,
    pub estimate: f64,
    /// Variance of the per-path weighted outcomes (denominator M - 1).
    pub sample_variance: f64,
    pub relative_error: f64,
    pub proportion_in_event: f64,
    /// Mean of the squared per-path outcomes.
    pub second_moment: f64,
    pub samples: usize,
    pub master_seed: u64,
    pub dt: f64,
    pub blowup_count: usize,
    pub reliable: bool,
}

impl EstimatorReport {
    pub fn std_error(&self) -> f64 {
        (self.sample_variance / (self.samples - self.blowup_count) as f64).sqrt()
    }
}

/// Per-path quantities kept after reduction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathSummary {
    pub statistic: f64,
    pub outcome: f64,
    pub log_weight: f64,
    pub in_event: bool,
}

#[derive(Clone, Debug)]
pub struct EnsembleOutput {
    pub report: EstimatorReport,
    /// In path-index order; blown-up paths are absent.
    pub paths: Vec<PathSummary>,
}

/// Everything an ensemble needs besides the control.
#[derive(Clone, Copy, Debug)]
pub struct EnsembleSpec<'a> {
    pub model: &'a SdeModel,
    pub obs: &'a EventObservable,
    pub x0: &'a [f64],
    pub grid: TimeGrid,
    pub scheme: Scheme,
    pub weight_rule: WeightRule,
    pub samples: usize,
    pub seed: u64,
}

impl<'a> EnsembleSpec<'a> {
    pub fn new(model: &'a SdeModel, obs: &'a EventObservable, x0: &'a [f64], horizon: f64, dt: f64, samples: usize, seed: u64) -> Result<Self> {
        Ok(EnsembleSpec {
            model,
            obs,
            x0,
            grid: TimeGrid::new(horizon, dt)?,
            scheme: Scheme::default_for(model),
            weight_rule: WeightRule::Ito,
            samples,
            seed,
        })
    }

    pub fn path_setup(&self) -> PathSetup<'a> {
        PathSetup {
            model: self.model,
            obs: self.obs,
            x0: self.x0,
            grid: self.grid,
            scheme: self.scheme,
            weight_rule: self.weight_rule,
            record_stride: None,
        }
    }
}

/// Simulates `samples` paths in parallel (each on its own stream) and reduces them in index order.
pub fn run_paths<F>(method: Method, obs: &EventObservable, samples: usize, seed: u64, dt: f64, path: F) -> Result<EnsembleOutput>
where
    F: Fn(u64, &mut NoiseStream) -> Result<PathResult> + Sync,
{
    if samples < 2 {
        return Err(Error::Config(format!("an ensemble needs at least 2 samples, got {samples}")));
    }
    let results: Vec<Result<PathSummary>> = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let p = path(i, &mut derive_path_rng(seed, i))?;
            Ok(PathSummary {
                statistic: obs.margin.statistic(&p.terminal_state),
                outcome: obs.eval(&p.terminal_state) * p.log_weight.exp(),
                log_weight: p.log_weight,
                in_event: p.in_event,
            })
        })
        .collect();
    let mut paths = Vec::with_capacity(samples);
    let mut blowups = 0;
    for r in results {
        match r {
            Ok(s) => paths.push(s),
            Err(Error::PathBlowup { .. }) => blowups += 1,
            Err(e) => return Err(e),
        }
    }
    let report = reduce(method, &paths, samples, blowups, seed, dt)?;
    Ok(EnsembleOutput { report, paths })
}

fn reduce(method: Method, paths: &[PathSummary], samples: usize, blowups: usize, seed: u64, dt: f64) -> Result<EstimatorReport> {
    let m = paths.len();
    if m < 2 {
        return Err(Error::Numerical(format!("only {m} of {samples} paths finished without blowing up")));
    }
    let mut sum = KahanSum::default();
    let mut sq = KahanSum::default();
    let mut hits = 0usize;
    for p in paths {
        sum.add(p.outcome);
        sq.add(p.outcome * p.outcome);
        hits += usize::from(p.in_event);
    }
    let mean = sum.value() / m as f64;
    let mut dev = KahanSum::default();
    for p in paths {
        let e = p.outcome - mean;
        dev.add(e * e);
    }
    let var = dev.value() / (m - 1) as f64;
    let relative_error = if mean > 0.0 { var.sqrt() / mean } else { f64::INFINITY };
    Ok(EstimatorReport {
        method,
        estimate: mean,
        sample_variance: var,
        relative_error,
        proportion_in_event: hits as f64 / m as f64,
        second_moment: sq.value() / m as f64,
        samples,
        master_seed: seed,
        dt,
        blowup_count: blowups,
        reliable: blowups == 0,
    })
}

/// Runs `spec.samples` paths, controlled when `control` is given.
pub fn run_ensemble<C: Control>(spec: &EnsembleSpec<'_>, control: Option<&C>) -> Result<EnsembleOutput> {
    let setup = spec.path_setup();
    setup.validate(control)?;
    let method = if control.is_some() { Method::Is } else { Method::Mc };
    run_paths(method, spec.obs, spec.samples, spec.seed, spec.grid.dt, |i, rng| simulate_path(&setup, control, rng, i))
}

pub fn run_mc(spec: &EnsembleSpec<'_>) -> Result<EnsembleOutput> {
    run_ensemble::<NoControl>(spec, None)
}

/// Runs `f` on a dedicated pool with `workers` threads (the global pool when `None`).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Paths with recorded trajectories, for plotting.
pub fn sample_trajectories<C: Control>(spec: &EnsembleSpec<'_>, control: Option<&C>, count: usize, stride: usize) -> Result<Vec<PathResult>> {
    let setup = PathSetup { record_stride: Some(stride), ..spec.path_setup() };
    setup.validate(control)?;
    (0..count as u64).into_par_iter().map(|i| simulate_path(&setup, control, &mut derive_path_rng(spec.seed, i), i)).collect()
}
