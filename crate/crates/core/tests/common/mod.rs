//! Shared fixtures and property checks, used by the proptest suite and the acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeMap;

use koopman_is::basis::{build_basis, BasisFamily};
use koopman_is::doob::{regress_observable, DoobController};
use koopman_is::estimator::{run_ensemble, run_mc, second_moment_bound, with_workers, EnsembleSpec};
use koopman_is::gedmd::{fit_spectrum, gaussian_points, generate_test_points, IcGrid, KoopmanSpectrum, TestPointSet, TrajectorySampling};
use koopman_is::model::{make_builtin_model, BUILTIN_MODELS};
use koopman_is::model::{EventObservable, Margin, SdeModel};
use koopman_is::paths::Scheme;

pub const HORIZON: f64 = 1.0;
pub const DT: f64 = 0.01;

/// A small, fast problem on one built-in model: short horizon, moderate event, cheap spectrum.
pub struct Fixture {
    pub name: &'static str,
    pub model: SdeModel,
    pub x0: Vec<f64>,
    pub obs: EventObservable,
    pub points: TestPointSet,
    pub spectrum: KoopmanSpectrum,
    /// Controller at `c = 1` fitted to the mollified event.
    pub controller: DoobController,
    /// Whether `spectrum` holds exact eigenfunctions (linear model, polynomial basis).
    pub exact_spectrum: bool,
}

pub fn model_names() -> [&'static str; 6] {
    BUILTIN_MODELS
}

fn params(name: &str) -> BTreeMap<String, f64> {
    let mut p = BTreeMap::new();
    if name == "advdiff" {
        p.insert("n_modes".to_string(), 3.0);
    }
    p
}

fn x0(name: &str, d: usize) -> Vec<f64> {
    match name {
        "vdp" => vec![2.0, 0.0],
        "duffing" => vec![-1.5, 0.0],
        _ => vec![0.0; d],
    }
}

/// Threshold on `x[0]` exceeded by about 20% of uncontrolled paths.
fn pilot_threshold(model: &SdeModel, x0: &[f64]) -> f64 {
    let obs = EventObservable::indicator(Margin::HalfSpace { coord: 0, threshold: 0.0 });
    let spec = EnsembleSpec::new(model, &obs, x0, HORIZON, DT, 400, 0xfeed).unwrap();
    let mut xs: Vec<f64> = run_mc(&spec).unwrap().paths.iter().map(|p| p.statistic).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() * 4 / 5]
}

pub fn fixture(name: &'static str) -> Fixture {
    let model = make_builtin_model(name, &params(name)).unwrap();
    let d = model.dim_state();
    let x0 = x0(name, d);
    let threshold = pilot_threshold(&model, &x0);
    let obs = EventObservable::indicator(Margin::HalfSpace { coord: 0, threshold });
    let (points, basis, exact) = match name {
        "vdp" | "duffing" => {
            let h = if name == "vdp" { 3.0 } else { 2.0 };
            let bounds = vec![[-h - 1.0, h + 1.0]; 2];
            let grid = IcGrid { lower: vec![-h; 2], upper: vec![h; 2], counts: vec![6, 6] };
            let sampling = TrajectorySampling { t_traj: 2.0, stride: 0.1, max_dt: 0.01, scheme: Scheme::default_for(&model) };
            let pts = generate_test_points(&model, &grid, &sampling, 3).unwrap().retain_in_box(&bounds).unwrap();
            (pts, build_basis(BasisFamily::LegendreBox, 2, 4, Some(&bounds[..])).unwrap(), false)
        }
        _ => {
            let std = if name == "nonnormal2d" { 0.3 } else { 1.5 };
            let pts = gaussian_points(&vec![0.0; d], &vec![std; d], 300, 3).unwrap();
            (pts, build_basis(BasisFamily::Hermite, d, 2, None).unwrap(), true)
        }
    };
    let spectrum = fit_spectrum(&model, &basis, &points, 1e6).unwrap();
    let fit_obs = obs.with_mode(koopman_is::model::ObsMode::Mollified);
    let (controller, _) = DoobController::fit(&model, &spectrum, &points.points, &fit_obs, HORIZON).unwrap();
    Fixture { name, model, x0, obs, points, spectrum, controller, exact_spectrum: exact }
}

pub fn all_fixtures() -> Vec<Fixture> {
    model_names().into_iter().map(fixture).collect()
}

impl Fixture {
    pub fn spec(&self, samples: usize, seed: u64) -> EnsembleSpec<'_> {
        EnsembleSpec::new(&self.model, &self.obs, &self.x0, HORIZON, DT, samples, seed).unwrap()
    }
}

pub type Check = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// IS with the fitted controller at multiplier `c` agrees with plain MC, and the mean
/// likelihood ratio is one.
pub fn girsanov_unbiased(f: &Fixture, c: f64, samples: usize, seed: u64) -> Check {
    let ctl = f.controller.with_multiplier(c).map_err(|e| e.to_string())?;
    let spec = f.spec(samples, seed);
    let prepared = ctl.prepare(&spec.grid).map_err(|e| e.to_string())?;
    let is = run_ensemble(&spec, Some(&prepared)).map_err(|e| e.to_string())?;
    let mc = run_mc(&f.spec(samples, seed ^ 0x5a5a)).map_err(|e| e.to_string())?;
    let (a, b) = (&is.report, &mc.report);
    let se = (a.std_error().powi(2) + b.std_error().powi(2)).sqrt();
    ensure((a.estimate - b.estimate).abs() <= 4.5 * se, || {
        format!("{}: IS {:.4e} vs MC {:.4e} differ by more than 4.5 s.e. ({se:.2e})", f.name, a.estimate, b.estimate)
    })?;
    let w: Vec<f64> = is.paths.iter().map(|p| p.log_weight.exp()).collect();
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let wse = (var / n).sqrt();
    ensure((mean - 1.0).abs() <= 4.5 * wse.max(1e-12), || format!("{}: mean weight {mean:.5} (s.e. {wse:.2e})", f.name))
}

/// Shifting the constant coefficient leaves the gradient of the KBE approximant unchanged and
/// rescales the bias by a positive factor wherever the shifted value stays positive.
pub fn positivization_invariance(f: &Fixture, extra_shift: f64, t: f64, x: &[f64]) -> Check {
    let base = &f.controller;
    let shifted = base.with_shift(base.positivization().shift + extra_shift).map_err(|e| e.to_string())?;
    let (v0, g0) = base.kbe_value_grad(t, x).map_err(|e| e.to_string())?;
    let (v1, g1) = shifted.kbe_value_grad(t, x).map_err(|e| e.to_string())?;
    let scale = g0.iter().fold(1e-300f64, |m, g| m.max(g.abs()));
    for (a, b) in g0.iter().zip(&g1) {
        ensure((a - b).abs() <= 1e-9 * scale, || format!("{}: gradient changed {a:e} -> {b:e}", f.name))?;
    }
    if v0 > base.floor() && v1 > shifted.floor() {
        let u0 = base.bias_eval(t, x).map_err(|e| e.to_string())?;
        let u1 = shifted.bias_eval(t, x).map_err(|e| e.to_string())?;
        let ratio = v0 / v1;
        let umax = u0.iter().fold(1e-300f64, |m, u| m.max(u.abs()));
        for (a, b) in u0.iter().zip(&u1) {
            ensure((a * ratio - b).abs() <= 1e-9 * umax * ratio.max(1.0), || format!("{}: bias not a positive multiple", f.name))?;
        }
    }
    Ok(())
}

/// The regression residual never increases as eigenfunctions are appended.
pub fn regression_nesting(f: &Fixture) -> Check {
    let obs = f.obs.with_mode(koopman_is::model::ObsMode::Mollified);
    let values: Vec<f64> = f.points.points.iter().map(|x| obs.eval(x)).collect();
    let mut prev = f64::INFINITY;
    let mut k = 1;
    while k <= f.spectrum.len() {
        let sub = f.spectrum.truncated(k);
        let r = regress_observable(&sub, &f.points.points, &values).map_err(|e| e.to_string())?.residual_norm;
        ensure(r <= prev * (1.0 + 1e-9) + 1e-12, || format!("{}: residual rose from {prev:e} to {r:e} at {} pairs", f.name, sub.len()))?;
        prev = r;
        k = sub.len() + 1;
    }
    Ok(())
}

/// Plain MC with the indicator has sample variance `p(1-p) M/(M-1)`.
pub fn indicator_variance_identity(f: &Fixture, samples: usize, seed: u64) -> Check {
    let r = run_mc(&f.spec(samples, seed)).map_err(|e| e.to_string())?.report;
    let p = r.estimate;
    let m = r.samples as f64;
    let expect = p * (1.0 - p) * m / (m - 1.0);
    ensure((r.sample_variance - expect).abs() <= 1e-12 * expect.max(1e-300) + 1e-15, || {
        format!("{}: variance {:e} vs p(1-p)M/(M-1) = {expect:e}", f.name, r.sample_variance)
    })?;
    ensure(r.proportion_in_event == r.estimate, || format!("{}: hit fraction differs from the estimate", f.name))
}

/// The second-moment bound from the KBE approximant dominates the empirical second moment of
/// the IS estimator driven by the same approximant at `c = 1`. Applies where the approximant
/// solves the backward equation exactly; otherwise the check runs on the constant solution.
pub fn bound_dominates(f: &Fixture, samples: usize, seed: u64) -> Check {
    let ctl = if f.exact_spectrum { f.controller.clone() } else { constant_controller(f)? };
    let spec = f.spec(samples, seed);
    let prepared = ctl.prepare(&spec.grid).map_err(|e| e.to_string())?;
    let traj = koopman_is::estimator::sample_trajectories(&spec, Some(&prepared), samples, usize::MAX).map_err(|e| e.to_string())?;
    let event: Vec<Vec<f64>> = traj.iter().filter(|p| p.in_event).map(|p| p.terminal_state.clone()).collect();
    if event.is_empty() {
        return Err(format!("{}: no controlled path reached the event", f.name));
    }
    let bound = second_moment_bound(|t, x| Ok(ctl.kbe_value_grad(t, x)?.0), &f.obs, HORIZON, &f.x0, &event).map_err(|e| e.to_string())?;
    let out = run_ensemble(&spec, Some(&prepared)).map_err(|e| e.to_string())?;
    let m2 = out.report.second_moment;
    let se = {
        let sq: Vec<f64> = out.paths.iter().map(|p| p.outcome * p.outcome).collect();
        let var = sq.iter().map(|v| (v - m2) * (v - m2)).sum::<f64>() / (sq.len() as f64 - 1.0);
        (var / sq.len() as f64).sqrt()
    };
    ensure(m2 <= bound.bound + 4.0 * se, || format!("{}: second moment {m2:e} above bound {:e}", f.name, bound.bound))
}

fn constant_controller(f: &Fixture) -> Result<DoobController, String> {
    let sub = f.spectrum.truncated(1);
    let obs = EventObservable::indicator(Margin::HalfSpace { coord: 0, threshold: f64::NEG_INFINITY });
    let (ctl, _) = DoobController::fit(&f.model, &sub, &f.points.points, &obs, HORIZON).map_err(|e| e.to_string())?;
    Ok(ctl)
}

/// Worker count never changes an ensemble.
pub fn worker_determinism(f: &Fixture, workers: usize, samples: usize, seed: u64) -> Check {
    let ctl = f.controller.with_multiplier(2.0).map_err(|e| e.to_string())?;
    let spec = f.spec(samples, seed);
    let prepared = ctl.prepare(&spec.grid).map_err(|e| e.to_string())?;
    let one = with_workers(Some(1), || run_ensemble(&spec, Some(&prepared))).unwrap().map_err(|e| e.to_string())?;
    let many = with_workers(Some(workers), || run_ensemble(&spec, Some(&prepared))).unwrap().map_err(|e| e.to_string())?;
    ensure(one.report == many.report && one.paths == many.paths, || format!("{}: {workers} workers changed the ensemble", f.name))
}
