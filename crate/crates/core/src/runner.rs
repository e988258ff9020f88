//! End-to-end experiments: points, spectrum, regression, tuning, ensemble and output files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::basis::build_basis;
use crate::config::{output_root, DoobBlock, ExperimentConfig, PointsBlock};
use crate::doob::{sweep_multipliers, tune_multiplier, tune_offset, DoobController, SweepRow};
use crate::error::{Error, Result, StageExt};
use crate::estimator::{run_ensemble, run_mc, sample_trajectories, with_workers, EnsembleOutput, EnsembleSpec, EstimatorReport, Method};
use crate::gedmd::{fit_spectrum, gaussian_points, generate_test_points, IcGrid, KoopmanSpectrum, TestPointSet, TrajectorySampling};
use crate::model::{make_builtin_model, EventObservable, Margin, SdeModel};
use crate::paths::{derive_path_rng, NoControl, Scheme, TimeGrid};
use crate::spde::{fit_spde_controller, run_spde_ensemble, simulate_spde_path, snapshot_points, tune_spde_multiplier, SnapshotSampling, SpdeDoob, SpectralSpde};

pub const RESULTS_FILE: &str = "results.csv";
pub const EIGEN_FILE: &str = "eigen.csv";
pub const CONTROLLER_FILE: &str = "controller.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const TRAJECTORY_FILE: &str = "trajectories.csv";
pub const FIELD_FILE: &str = "field.csv";

pub const RESULTS_HEADER: [&str; 13] =
    ["method", "model", "p", "estimate", "variance", "relative_error", "proportion_in_event", "M", "dt", "seed", "c", "N_eigenfunctions", "blowup_count"];

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Load `controller.json` from the output directory instead of fitting and tuning.
    pub reuse_controller: bool,
    /// Overrides the configured output directory.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub model: String,
    pub p: Option<u32>,
    pub estimate: f64,
    pub variance: f64,
    pub relative_error: f64,
    pub proportion_in_event: f64,
    #[serde(rename = "M")]
    pub samples: usize,
    pub dt: f64,
    pub seed: u64,
    pub c: Option<f64>,
    #[serde(rename = "N_eigenfunctions")]
    pub n_eigenfunctions: Option<usize>,
    pub blowup_count: usize,
}

impl ResultRow {
    fn record(&self) -> Vec<String> {
        let opt = |v: Option<String>| v.unwrap_or_default();
        vec![
            self.method.as_str().to_string(),
            self.model.clone(),
            opt(self.p.map(|p| p.to_string())),
            format!("{:e}", self.estimate),
            format!("{:e}", self.variance),
            format!("{:e}", self.relative_error),
            format!("{}", self.proportion_in_event),
            self.samples.to_string(),
            format!("{:e}", self.dt),
            self.seed.to_string(),
            opt(self.c.map(|c| c.to_string())),
            opt(self.n_eigenfunctions.map(|n| n.to_string())),
            self.blowup_count.to_string(),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub row: ResultRow,
    pub report: EstimatorReport,
    pub sweep: Vec<SweepRow>,
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
    pub floor_activations: u64,
}

/// Fixed-width histogram with underflow and overflow counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lower: f64,
    pub upper: f64,
    pub counts: Vec<usize>,
    pub underflow: usize,
    pub overflow: usize,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.underflow + self.overflow
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin_lower", "bin_upper", "count"])?;
        let width = (self.upper - self.lower) / self.counts.len() as f64;
        w.write_record(["-inf".to_string(), self.lower.to_string(), self.underflow.to_string()])?;
        for (i, c) in self.counts.iter().enumerate() {
            let lo = self.lower + width * i as f64;
            let hi = if i + 1 == self.counts.len() { self.upper } else { lo + width };
            w.write_record([lo.to_string(), hi.to_string(), c.to_string()])?;
        }
        w.write_record([self.upper.to_string(), "inf".to_string(), self.overflow.to_string()])?;
        w.flush()?;
        Ok(())
    }
}

/// Bins `samples` into `bins` equal bins over `range` (default: the sample range). Values equal
/// to the upper end fall in the last bin.
pub fn emit_histogram(samples: &[f64], bins: usize, range: Option<[f64; 2]>) -> Result<Histogram> {
    if samples.is_empty() {
        return Err(Error::Config("histogram of an empty sample".into()));
    }
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let [lower, upper] = range.unwrap_or_else(|| {
        let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            [lo, hi]
        } else {
            [lo - 0.5, lo + 0.5]
        }
    });
    if !(upper > lower) {
        return Err(Error::Config(format!("histogram range [{lower}, {upper}] is empty")));
    }
    let mut h = Histogram { lower, upper, counts: vec![0; bins], underflow: 0, overflow: 0 };
    let width = (upper - lower) / bins as f64;
    for &v in samples {
        if v < lower {
            h.underflow += 1;
        } else if v > upper || v.is_nan() {
            h.overflow += 1;
        } else {
            let i = (((v - lower) / width) as usize).min(bins - 1);
            h.counts[i] += 1;
        }
    }
    Ok(h)
}

/// Removes the files it tracks unless committed.
struct OutputGuard {
    created: Vec<PathBuf>,
    committed: bool,
}

impl OutputGuard {
    fn track(&mut self, p: PathBuf) -> PathBuf {
        self.created.push(p.clone());
        p
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.created {
                let _ = fs::remove_file(p);
            }
        }
    }
}

pub fn resolve_out_dir(cfg: &ExperimentConfig, opts: &RunOptions) -> PathBuf {
    match &opts.out_dir {
        Some(d) => d.clone(),
        None if cfg.output.dir.is_absolute() => cfg.output.dir.clone(),
        None => output_root().join(&cfg.output.dir),
    }
}

fn build_model(cfg: &ExperimentConfig) -> Result<SdeModel> {
    make_builtin_model(&cfg.model.name, &cfg.model.params)
}

fn build_spde(cfg: &ExperimentConfig) -> Result<SpectralSpde> {
    let m = build_model(cfg)?;
    let p = m.params();
    SpectralSpde::new(p["n_modes"] as usize, p["alpha"], p["b"], p["eps"])
}

fn estimate_obs(cfg: &ExperimentConfig) -> EventObservable {
    EventObservable { margin: cfg.event.margin.clone(), sharpness: cfg.event.sharpness, mode: cfg.event.estimate }
}

fn fit_obs(cfg: &ExperimentConfig) -> EventObservable {
    EventObservable { margin: cfg.event.margin.clone(), sharpness: cfg.event.sharpness, mode: cfg.event.fit }
}

fn doob_block(cfg: &ExperimentConfig) -> DoobBlock {
    cfg.doob.clone().unwrap_or_default()
}

fn tuning_seed(cfg: &ExperimentConfig) -> u64 {
    doob_block(cfg).tuning_seed.unwrap_or(cfg.run.seed.wrapping_add(1))
}

fn ensemble_spec<'a>(cfg: &'a ExperimentConfig, model: &'a SdeModel, obs: &'a EventObservable) -> Result<EnsembleSpec<'a>> {
    let r = &cfg.run;
    let mut spec = EnsembleSpec::new(model, obs, &r.x0, r.horizon, r.dt, r.samples, r.seed)?;
    spec.scheme = r.scheme.unwrap_or(spec.scheme);
    spec.weight_rule = r.weight_rule;
    Ok(spec)
}

/// Training and holdout points from the `[points]` block.
pub fn build_points(cfg: &ExperimentConfig, model: &SdeModel) -> Result<TestPointSet> {
    let pts = match cfg.points.as_ref().ok_or_else(|| Error::Config("missing [points] block".into()))? {
        PointsBlock::Trajectories { lower, upper, counts, t_traj, stride, max_dt, seed } => {
            let grid = IcGrid { lower: lower.clone(), upper: upper.clone(), counts: counts.clone() };
            let sampling = TrajectorySampling { t_traj: *t_traj, stride: *stride, max_dt: *max_dt, scheme: Scheme::default_for(model) };
            generate_test_points(model, &grid, &sampling, *seed)?
        }
        PointsBlock::Gaussian { mean, std, count, seed } => gaussian_points(mean, std, *count, *seed)?,
        PointsBlock::Snapshots { .. } => return Err(Error::Config("snapshot points apply to the advdiff model only".into())),
    };
    match cfg.basis.as_ref().and_then(|b| b.bounds.as_ref()) {
        Some(bounds) => pts.retain_in_box(bounds),
        None => Ok(pts),
    }
}

/// Validated spectrum for the configured basis and points.
pub fn build_spectrum(cfg: &ExperimentConfig, model: &SdeModel, points: &TestPointSet) -> Result<KoopmanSpectrum> {
    let b = cfg.basis.as_ref().ok_or_else(|| Error::Config("missing [basis] block".into()))?;
    let basis = build_basis(b.family, model.dim_state(), b.degree, b.bounds.as_deref())?;
    let g = cfg.gedmd.clone().unwrap_or_default();
    let spectrum = fit_spectrum(model, &basis, points, g.threshold)?;
    Ok(match g.max_eigenfunctions {
        Some(n) => spectrum.truncated(n),
        None => spectrum,
    })
}

/// Fitted and positivized controller at `c = 1` (before any tuning).
pub fn fit_controller(cfg: &ExperimentConfig, model: &SdeModel) -> Result<(DoobController, KoopmanSpectrum)> {
    let points = build_points(cfg, model).stage("points")?;
    let spectrum = build_spectrum(cfg, model, &points).stage("gedmd")?;
    let (ctl, _) = DoobController::fit(model, &spectrum, &points.points, &fit_obs(cfg), cfg.run.horizon).stage("regression")?;
    Ok((ctl, spectrum))
}

/// Applies the `[doob.offset]` calibration, if configured; the multiplier is reset to 1.
fn calibrate_offset(d: &DoobBlock, ctl: DoobController, spec: &EnsembleSpec<'_>) -> Result<DoobController> {
    let Some(o) = &d.offset else { return Ok(ctl) };
    let tspec = EnsembleSpec { seed: o.seed, ..*spec };
    let at_c = ctl.with_multiplier(o.c).stage("tuning")?;
    let (shifted, _) = tune_offset(&at_c, &tspec, o.batch, o.target, o.iterations).stage("tuning")?;
    shifted.with_multiplier(1.0).stage("tuning")
}

fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["c", "proportion_in_event", "estimate", "variance", "relative_error", "blowup_count"])?;
    for r in rows {
        w.write_record([
            r.c.to_string(),
            r.proportion_in_event.to_string(),
            format!("{:e}", r.estimate),
            format!("{:e}", r.variance),
            format!("{:e}", r.relative_error),
            r.blowup_count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn append_results(path: &Path, row: &ResultRow) -> Result<()> {
    let exists = path.exists() && fs::metadata(path)?.len() > 0;
    if exists {
        let first = fs::read_to_string(path)?.lines().next().unwrap_or_default().to_string();
        if first != RESULTS_HEADER.join(",") {
            return Err(Error::Config(format!("{} exists with a different header", path.display())));
        }
    }
    let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if !exists {
        w.write_record(RESULTS_HEADER)?;
    }
    w.write_record(row.record())?;
    w.flush()?;
    Ok(())
}

fn write_trajectories(path: &Path, paths: &[crate::paths::PathResult]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    let d = paths.first().map(|p| p.terminal_state.len()).unwrap_or(0);
    let cols: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    writeln!(f, "path,t,{},log_weight", cols.join(","))?;
    for p in paths {
        for (t, x) in p.trajectory.iter().flatten() {
            let xs: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            writeln!(f, "{},{t},{},{}", p.path_index, xs.join(","), p.log_weight)?;
        }
    }
    f.flush()?;
    Ok(())
}

fn load_controller(dir: &Path, model: &SdeModel, horizon: f64) -> Result<DoobController> {
    let text = fs::read_to_string(dir.join(CONTROLLER_FILE))?;
    let ctl = DoobController::from_json(&text)?;
    if ctl.model().name() != model.name() || ctl.model().params() != model.params() {
        return Err(Error::Config("stored controller was fitted for a different model".into()));
    }
    if (ctl.horizon() - horizon).abs() > 1e-12 * horizon {
        return Err(Error::Config(format!("stored controller horizon {} differs from run horizon {horizon}", ctl.horizon())));
    }
    Ok(ctl)
}

/// Runs the configured experiment and writes its output files. On failure, files created by
/// this call are removed and the error names the failing stage.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentOutcome> {
    cfg.validate().stage("config")?;
    let dir = resolve_out_dir(cfg, opts);
    fs::create_dir_all(&dir).stage("output")?;
    with_workers(cfg.run.workers, || {
        if cfg.is_spde() {
            run_spde_experiment(cfg, opts, &dir)
        } else {
            run_sde_experiment(cfg, opts, &dir)
        }
    })?
}

fn new_guard() -> OutputGuard {
    OutputGuard { created: Vec::new(), committed: false }
}

fn finish(
    cfg: &ExperimentConfig,
    dir: &Path,
    mut guard: OutputGuard,
    out: &EnsembleOutput,
    row: ResultRow,
    sweep: Vec<SweepRow>,
    warnings: Vec<String>,
    floor_activations: u64,
) -> Result<ExperimentOutcome> {
    let stats: Vec<f64> = out.paths.iter().map(|p| p.statistic).collect();
    let hist = emit_histogram(&stats, cfg.output.histogram_bins, cfg.output.histogram_range).stage("output")?;
    hist.write_csv(&guard.track(dir.join(HISTOGRAM_FILE))).stage("output")?;
    let results = dir.join(RESULTS_FILE);
    append_results(&results, &row).stage("output")?;
    guard.committed = true;
    let mut files = guard.created.clone();
    files.push(results);
    Ok(ExperimentOutcome { dir: dir.to_path_buf(), row, report: out.report.clone(), sweep, files, warnings, floor_activations })
}

fn run_sde_experiment(cfg: &ExperimentConfig, opts: &RunOptions, dir: &Path) -> Result<ExperimentOutcome> {
    let mut guard = new_guard();
    let model = build_model(cfg).stage("model")?;
    let obs = estimate_obs(cfg);
    let spec = ensemble_spec(cfg, &model, &obs).stage("ensemble")?;
    spec.path_setup().validate::<NoControl>(None).stage("ensemble")?;
    let p = cfg.basis.as_ref().map(|b| b.degree);
    let mut warnings = Vec::new();
    if cfg.run.method == Method::Mc {
        let out = run_mc(&spec).stage("ensemble")?;
        if let Some(t) = cfg.output.trajectories {
            let tr = sample_trajectories::<NoControl>(&spec, None, t.count, t.stride).stage("output")?;
            write_trajectories(&guard.track(dir.join(TRAJECTORY_FILE)), &tr).stage("output")?;
        }
        let row = row_from(cfg, &out.report, p, None, None);
        return finish(cfg, dir, guard, &out, row, Vec::new(), warnings, 0);
    }

    let controller_path = dir.join(CONTROLLER_FILE);
    let mut sweep = Vec::new();
    let ctl = if opts.reuse_controller && controller_path.exists() {
        load_controller(dir, &model, cfg.run.horizon).stage("controller")?
    } else {
        let (mut ctl, spectrum) = fit_controller(cfg, &model)?;
        if let Some(w) = &spectrum.rank_warning {
            warnings.push(w.clone());
        }
        spectrum.write_report(&guard.track(dir.join(EIGEN_FILE))).stage("output")?;
        let d = doob_block(cfg);
        ctl = calibrate_offset(&d, ctl, &spec)?;
        let tspec = EnsembleSpec { seed: tuning_seed(cfg), ..spec };
        let chosen = match d.multiplier {
            Some(c) => c,
            None => {
                let t = tune_multiplier(&ctl, &tspec, &d.multipliers, d.tuning_batch, d.target).stage("tuning")?;
                sweep = t.sweep;
                write_sweep(&guard.track(dir.join(SWEEP_FILE)), &sweep).stage("output")?;
                t.chosen
            }
        };
        ctl.set_multiplier(chosen).stage("tuning")?;
        let json = ctl.to_json().stage("output")?;
        fs::write(guard.track(controller_path.clone()), json).stage("output")?;
        ctl
    };
    let prepared = ctl.prepare(&spec.grid).stage("ensemble")?;
    let out = run_ensemble(&spec, Some(&prepared)).stage("ensemble")?;
    if let Some(t) = cfg.output.trajectories {
        let tr = sample_trajectories(&spec, Some(&prepared), t.count, t.stride).stage("output")?;
        write_trajectories(&guard.track(dir.join(TRAJECTORY_FILE)), &tr).stage("output")?;
    }
    let row = row_from(cfg, &out.report, p, Some(ctl.multiplier()), Some(ctl.num_eigenfunctions()));
    let floor = ctl.floor_activations();
    finish(cfg, dir, guard, &out, row, sweep, warnings, floor)
}

fn spde_level(cfg: &ExperimentConfig) -> Result<f64> {
    match cfg.event.margin {
        Margin::NormExterior { level } => Ok(level),
        _ => Err(Error::Config("advdiff supports the norm event only".into())),
    }
}

fn run_spde_experiment(cfg: &ExperimentConfig, opts: &RunOptions, dir: &Path) -> Result<ExperimentOutcome> {
    let mut guard = new_guard();
    let spde = build_spde(cfg).stage("model")?;
    let level = spde_level(cfg).stage("config")?;
    if cfg.run.x0.iter().any(|v| *v != 0.0) {
        return Err(Error::Config("advdiff starts from the zero field; leave run.x0 empty".into())).stage("config");
    }
    let grid = TimeGrid::new(cfg.run.horizon, cfg.run.dt).stage("ensemble")?;
    let (r, mut sweep) = (&cfg.run, Vec::new());
    let control = if r.method == Method::Is {
        let path = dir.join(CONTROLLER_FILE);
        if opts.reuse_controller && path.exists() {
            let ctl: SpdeDoob = serde_json::from_str(&fs::read_to_string(&path).stage("controller")?).stage("controller")?;
            Some(ctl)
        } else {
            let Some(PointsBlock::Snapshots { amplitudes, replicates, t_traj, stride, dt, seed }) = cfg.points.clone() else {
                return Err(Error::Config("advdiff needs snapshot points".into())).stage("points");
            };
            let sampling = SnapshotSampling { amplitudes, replicates, t_traj, stride, dt };
            let pts = snapshot_points(&spde, &sampling, seed).stage("points")?;
            let base = fit_spde_controller(&spde, &pts, level, r.horizon).stage("regression")?;
            let d = doob_block(cfg);
            let ctl = match d.multiplier {
                Some(c) => base.with_multiplier(c).stage("tuning")?,
                None => {
                    let t = tune_spde_multiplier(&spde, &base, level, &grid, &d.multipliers, d.tuning_batch, tuning_seed(cfg), d.target).stage("tuning")?;
                    sweep = t.sweep;
                    write_sweep(&guard.track(dir.join(SWEEP_FILE)), &sweep).stage("output")?;
                    base.with_multiplier(t.chosen).stage("tuning")?
                }
            };
            fs::write(guard.track(path), serde_json::to_string_pretty(&ctl).stage("output")?).stage("output")?;
            Some(ctl)
        }
    } else {
        None
    };
    let out = run_spde_ensemble(&spde, control.as_ref(), level, &grid, r.samples, r.seed).stage("ensemble")?;
    if let Some(t) = cfg.output.trajectories {
        let st = spde.stepper(grid.dt).stage("output")?;
        let obs = estimate_obs(cfg);
        let p = simulate_spde_path(&spde, &st, &grid, &obs, control.as_ref(), &mut derive_path_rng(r.seed, 0), 0, Some(t.stride)).stage("output")?;
        spde.write_field_csv(p.trajectory.as_deref().unwrap_or_default(), &guard.track(dir.join(FIELD_FILE))).stage("output")?;
    }
    let row = row_from(cfg, &out.report, None, control.as_ref().map(|c| c.multiplier), control.as_ref().map(|_| 2));
    let floor = control.as_ref().map(|c| c.floor_activations()).unwrap_or(0);
    finish(cfg, dir, guard, &out, row, sweep, Vec::new(), floor)
}

fn row_from(cfg: &ExperimentConfig, r: &EstimatorReport, p: Option<u32>, c: Option<f64>, n: Option<usize>) -> ResultRow {
    ResultRow {
        method: r.method,
        model: cfg.model.name.clone(),
        p,
        estimate: r.estimate,
        variance: r.sample_variance,
        relative_error: r.relative_error,
        proportion_in_event: r.proportion_in_event,
        samples: r.samples,
        dt: r.dt,
        seed: r.master_seed,
        c,
        n_eigenfunctions: n,
        blowup_count: r.blowup_count,
    }
}

/// Fits the controller and runs `tuning_batch` paths per configured multiplier (the `sweep-c` verb).
pub fn sweep_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<(PathBuf, Vec<SweepRow>)> {
    cfg.validate().stage("config")?;
    let dir = resolve_out_dir(cfg, opts);
    fs::create_dir_all(&dir).stage("output")?;
    let d = doob_block(cfg);
    with_workers(cfg.run.workers, || {
        let rows = if cfg.is_spde() {
            let spde = build_spde(cfg).stage("model")?;
            let level = spde_level(cfg).stage("config")?;
            let Some(PointsBlock::Snapshots { amplitudes, replicates, t_traj, stride, dt, seed }) = cfg.points.clone() else {
                return Err(Error::Config("advdiff needs snapshot points".into())).stage("points");
            };
            let pts = snapshot_points(&spde, &SnapshotSampling { amplitudes, replicates, t_traj, stride, dt }, seed).stage("points")?;
            let base = fit_spde_controller(&spde, &pts, level, cfg.run.horizon).stage("regression")?;
            let grid = TimeGrid::new(cfg.run.horizon, cfg.run.dt).stage("tuning")?;
            tune_spde_multiplier(&spde, &base, level, &grid, &d.multipliers, d.tuning_batch, tuning_seed(cfg), d.target).stage("tuning")?.sweep
        } else {
            let model = build_model(cfg).stage("model")?;
            let obs = estimate_obs(cfg);
            let spec = ensemble_spec(cfg, &model, &obs).stage("tuning")?;
            let (ctl, _) = fit_controller(cfg, &model)?;
            let ctl = calibrate_offset(&d, ctl, &spec)?;
            let tspec = EnsembleSpec { samples: d.tuning_batch, seed: tuning_seed(cfg), ..spec };
            sweep_multipliers(&ctl, &tspec, &d.multipliers).stage("tuning")?
        };
        let path = dir.join(SWEEP_FILE);
        write_sweep(&path, &rows).stage("output")?;
        Ok((path, rows))
    })?
}

/// Fits and validates the spectrum and writes `eigen.csv` (the `export-eigen` verb).
pub fn export_eigen(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<(PathBuf, KoopmanSpectrum)> {
    cfg.validate().stage("config")?;
    if cfg.is_spde() {
        return Err(Error::Unsupported("advdiff uses a fixed two-functional expansion; there is no fitted spectrum".into()));
    }
    let dir = resolve_out_dir(cfg, opts);
    fs::create_dir_all(&dir).stage("output")?;
    with_workers(cfg.run.workers, || {
        let model = build_model(cfg).stage("model")?;
        let points = build_points(cfg, &model).stage("points")?;
        let spectrum = build_spectrum(cfg, &model, &points).stage("gedmd")?;
        let path = dir.join(EIGEN_FILE);
        spectrum.write_report(&path).stage("output")?;
        Ok((path, spectrum))
    })?
}

/// Event, initial state and horizon of a built-in benchmark problem.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub margin: Margin,
    pub x0: Vec<f64>,
    pub horizon: f64,
}

/// The reference problem for each built-in model (`x0` of `advdiff` is the zero field of `n_modes`).
pub fn benchmark(name: &str, dim: usize) -> Result<Benchmark> {
    let (margin, x0, horizon) = match name {
        "ou1d" => (Margin::HalfSpace { coord: 0, threshold: 2.0 }, vec![0.0], 1.0),
        "nonnormal2d" => (Margin::NormExterior { level: 0.75 }, vec![0.0, 0.0], 10.0),
        "brownian_osc" => (Margin::AbsCoord { coord: 0, level: 3.0 }, vec![0.0, 0.0], 10.0),
        "advdiff" => (Margin::NormExterior { level: 2.5 }, vec![0.0; dim], 10.0),
        "vdp" => (Margin::NormExterior { level: 2.7 }, vec![2.0, 0.0], 10.0),
        "duffing" => (Margin::HalfSpace { coord: 0, threshold: 0.0 }, vec![-1.5, 0.0], 10.0),
        other => return Err(Error::ModelNotFound(other.to_string())),
    };
    Ok(Benchmark { margin, x0, horizon })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let h = emit_histogram(&xs, 1, None).unwrap();
        assert_eq!(h.counts, vec![10]);
        let h = emit_histogram(&xs, 3, Some([2.0, 6.0])).unwrap();
        assert_eq!((h.underflow, h.overflow), (2, 3));
        assert_eq!(h.counts, vec![2, 1, 2]);
        assert_eq!(h.total(), 10);
        assert!(emit_histogram(&[], 3, None).is_err());
        assert!(emit_histogram(&xs, 0, None).is_err());
    }

    #[test]
    fn guard_removes_uncommitted_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        {
            let mut g = new_guard();
            fs::write(g.track(p.clone()), "a").unwrap();
        }
        assert!(!p.exists());
    }
}
