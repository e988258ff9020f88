//! Approximate Doob transforms built from a Koopman spectrum.
//!
//! The terminal observable is regressed onto the realified eigenfunctions, the constant
//! coefficient is shifted to make the fit positive, and the fit is propagated backwards
//! in time with the eigenvalues:
//! `Phi(t, x) = sum_i f_i Part_i(exp(lambda_i (T - t)) phi_i(x))`.
//! The biasing control is `u = c B^T grad Phi / max(Phi, delta)`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use faer::{c64, Mat};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisEval, JetOrder};
use crate::error::{Error, Result};
use crate::estimator::{run_ensemble, EnsembleSpec, EstimatorReport};
use crate::gedmd::KoopmanSpectrum;
use crate::linalg::{lstsq, PINV_RTOL};
use crate::model::{make_builtin_model, EventObservable, SdeModel};
use crate::paths::{Control, TimeGrid};

pub const DEFAULT_MULTIPLIERS: [f64; 6] = [1.0, 2.0, 4.0, 6.0, 8.0, 16.0];
pub const DEFAULT_TUNING_BATCH: usize = 100;
pub const POSITIVITY_MARGIN: f64 = 1e-6;
pub const FLOOR_SCALE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Re,
    Im,
}

/// One real column of the realified eigenbasis: `Part(phi)` for a pair with `Im lambda >= 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct RealColumn {
    pub lambda: c64,
    pub part: Part,
    pub coeffs: Vec<c64>,
}

/// Realifies a conjugate-closed spectrum: one column per real pair, (Re, Im) per complex pair.
pub fn realify(spectrum: &KoopmanSpectrum) -> Vec<RealColumn> {
    let mut out = Vec::new();
    for p in &spectrum.pairs {
        if p.lambda.im == 0.0 {
            out.push(RealColumn { lambda: p.lambda, part: Part::Re, coeffs: p.coeffs.clone() });
        } else if p.lambda.im > 0.0 {
            out.push(RealColumn { lambda: p.lambda, part: Part::Re, coeffs: p.coeffs.clone() });
            out.push(RealColumn { lambda: p.lambda, part: Part::Im, coeffs: p.coeffs.clone() });
        }
    }
    out
}

impl RealColumn {
    /// Basis-coefficient vector of `Part(exp(lambda tau) phi)`, scaled by `weight`, added into `out`.
    fn accumulate(&self, tau: f64, weight: f64, out: &mut [f64]) {
        let e = (self.lambda * tau).exp();
        for (o, c) in out.iter_mut().zip(&self.coeffs) {
            let v = e * c;
            *o += weight * match self.part {
                Part::Re => v.re,
                Part::Im => v.im,
            };
        }
    }

    fn value(&self, psi: &[f64]) -> f64 {
        let mut acc = c64::new(0.0, 0.0);
        for (c, p) in self.coeffs.iter().zip(psi) {
            acc += c * p;
        }
        match self.part {
            Part::Re => acc.re,
            Part::Im => acc.im,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Regression {
    pub coefficients: Vec<f64>,
    pub fitted: Vec<f64>,
    pub residual_norm: f64,
    pub rank_warning: Option<String>,
}

/// Design matrix `C[j, i] = column_i(x_j)` over the realified eigenbasis.
pub fn design_matrix(spectrum: &KoopmanSpectrum, points: &[Vec<f64>]) -> Mat<f64> {
    let cols = realify(spectrum);
    let basis = &spectrum.basis;
    let mut ev = basis.evaluator();
    let mut c = Mat::zeros(points.len(), cols.len());
    for (j, x) in points.iter().enumerate() {
        basis.eval_into(x, JetOrder::Value, &mut ev);
        for (i, col) in cols.iter().enumerate() {
            c[(j, i)] = col.value(&ev.values);
        }
    }
    c
}

/// Least-squares fit of `f_values` at `points` onto the realified eigenfunctions.
pub fn regress_observable(spectrum: &KoopmanSpectrum, points: &[Vec<f64>], f_values: &[f64]) -> Result<Regression> {
    if spectrum.is_empty() {
        return Err(Error::EmptySpectrum { best_mse: f64::NAN, threshold: f64::NAN });
    }
    if points.len() != f_values.len() || points.is_empty() {
        return Err(Error::Shape(format!("{} regression points but {} values", points.len(), f_values.len())));
    }
    let c = design_matrix(spectrum, points);
    let f = Mat::from_fn(f_values.len(), 1, |j, _| f_values[j]);
    let sol = lstsq(c.as_ref(), f.as_ref(), PINV_RTOL)?;
    let coefficients: Vec<f64> = (0..c.ncols()).map(|i| sol.x[(i, 0)]).collect();
    let fit = &c * &sol.x;
    let fitted: Vec<f64> = (0..fit.nrows()).map(|j| fit[(j, 0)]).collect();
    let residual_norm = fitted.iter().zip(f_values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let rank_warning = sol.rank_deficient().then(|| format!("regression design has rank {} < {}", sol.rank, sol.full_rank));
    Ok(Regression { coefficients, fitted, residual_norm, rank_warning })
}

/// Index and value of the constant column (basis coefficients concentrated on the constant element).
pub fn constant_column(spectrum: &KoopmanSpectrum) -> Result<(usize, f64)> {
    for (i, col) in realify(spectrum).iter().enumerate() {
        if col.part != Part::Re || col.lambda.norm() > 1e-8 {
            continue;
        }
        let c0 = col.coeffs[0];
        let rest = col.coeffs[1..].iter().map(|c| c.norm()).fold(0.0, f64::max);
        if c0.re.abs() > 0.0 && rest <= 1e-8 * c0.norm() && c0.im.abs() <= 1e-12 * c0.norm() {
            return Ok((i, c0.re));
        }
    }
    Err(Error::NoConstantEigenfunction)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Positivization {
    /// Minimum fitted value over the regression points (`-eps`).
    pub min_fitted: f64,
    pub max_abs_fitted: f64,
    /// Margin `delta0`.
    pub margin: f64,
    /// Amount added to the terminal function (`max(eps, 0) + delta0`, or 0).
    pub shift: f64,
}

/// Shifts the constant coefficient so the fit exceeds the margin at every regression point.
pub fn positivize(spectrum: &KoopmanSpectrum, coefficients: &[f64], fitted: &[f64]) -> Result<(Vec<f64>, Positivization)> {
    let (idx, kappa) = constant_column(spectrum)?;
    if fitted.is_empty() {
        return Err(Error::Shape("positivization needs fitted values".into()));
    }
    let min_fitted = fitted.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_abs_fitted = fitted.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let margin = POSITIVITY_MARGIN * max_abs_fitted;
    let eps = -min_fitted;
    let shift = if min_fitted < margin { eps.max(0.0) + margin } else { 0.0 };
    let mut out = coefficients.to_vec();
    out[idx] += shift / kappa;
    Ok((out, Positivization { min_fitted, max_abs_fitted, margin, shift }))
}

mod model_serde {
    use super::*;
    use serde::{Deserializer, Serializer};
    use std::collections::BTreeMap;

    #[derive(Serialize, Deserialize)]
    struct ModelRef {
        name: String,
        params: BTreeMap<String, f64>,
    }

    pub fn serialize<S: Serializer>(m: &SdeModel, s: S) -> std::result::Result<S::Ok, S::Error> {
        if !m.is_builtin() {
            return Err(serde::ser::Error::custom(format!("custom model `{}` cannot be serialized", m.name())));
        }
        ModelRef { name: m.name().to_string(), params: m.params().clone() }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<SdeModel, D::Error> {
        let r = ModelRef::deserialize(d)?;
        make_builtin_model(&r.name, &r.params).map_err(serde::de::Error::custom)
    }
}

/// A finished approximate Doob transform. Immutable apart from the floor-activation counter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DoobController {
    #[serde(with = "model_serde")]
    model: SdeModel,
    spectrum: KoopmanSpectrum,
    coefficients: Vec<f64>,
    horizon: f64,
    multiplier: f64,
    floor: f64,
    positivization: Positivization,
    #[serde(skip)]
    columns: Vec<RealColumn>,
    #[serde(skip)]
    floor_hits: Arc<AtomicU64>,
}

impl PartialEq for DoobController {
    fn eq(&self, o: &Self) -> bool {
        self.model.name() == o.model.name()
            && self.model.params() == o.model.params()
            && self.spectrum == o.spectrum
            && self.coefficients == o.coefficients
            && self.horizon == o.horizon
            && self.multiplier == o.multiplier
            && self.floor == o.floor
            && self.positivization == o.positivization
    }
}

impl DoobController {
    /// Assembles a controller from positivized coefficients. `floor` defaults to
    /// `1e-8 * max |fitted|` via [`DoobController::fit`].
    pub fn new(model: SdeModel, spectrum: KoopmanSpectrum, coefficients: Vec<f64>, horizon: f64, multiplier: f64, floor: f64, positivization: Positivization) -> Result<Self> {
        let columns = realify(&spectrum);
        if coefficients.len() != columns.len() {
            return Err(Error::Shape(format!("{} coefficients for {} realified eigenfunctions", coefficients.len(), columns.len())));
        }
        if spectrum.basis.dim() != model.dim_state() {
            return Err(Error::Shape(format!("basis dimension {} vs model dimension {}", spectrum.basis.dim(), model.dim_state())));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Config(format!("controller horizon must be positive, got {horizon}")));
        }
        if !(floor > 0.0) {
            return Err(Error::InvalidParameter(format!("floor must be positive, got {floor}")));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numerical("non-finite expansion coefficient".into()));
        }
        let mut c = DoobController {
            model,
            spectrum,
            coefficients,
            horizon,
            multiplier: 1.0,
            floor,
            positivization,
            columns,
            floor_hits: Arc::new(AtomicU64::new(0)),
        };
        c.set_multiplier(multiplier)?;
        Ok(c)
    }

    /// Regression of `obs` (usually mollified) at the spectrum's training points, positivization and assembly with `c = 1`.
    pub fn fit(model: &SdeModel, spectrum: &KoopmanSpectrum, points: &[Vec<f64>], obs: &EventObservable, horizon: f64) -> Result<(Self, Regression)> {
        let f: Vec<f64> = points.iter().map(|x| obs.eval(x)).collect();
        let reg = regress_observable(spectrum, points, &f)?;
        let (coef, pos) = positivize(spectrum, &reg.coefficients, &reg.fitted)?;
        let floor = FLOOR_SCALE * pos.max_abs_fitted;
        let floor = if floor > 0.0 { floor } else { f64::MIN_POSITIVE };
        let ctl = DoobController::new(model.clone(), spectrum.clone(), coef, horizon, 1.0, floor, pos)?;
        Ok((ctl, reg))
    }

    /// Restores derived state after deserialization.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut c: DoobController = serde_json::from_str(text)?;
        c.columns = realify(&c.spectrum);
        if c.columns.len() != c.coefficients.len() {
            return Err(Error::Config("controller file has mismatched coefficients".into()));
        }
        c.floor_hits = Arc::new(AtomicU64::new(0));
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn model(&self) -> &SdeModel {
        &self.model
    }

    pub fn spectrum(&self) -> &KoopmanSpectrum {
        &self.spectrum
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn multiplier(&self) -> f64 {
        self.multiplier
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn positivization(&self) -> &Positivization {
        &self.positivization
    }

    pub fn num_eigenfunctions(&self) -> usize {
        self.spectrum.len()
    }

    pub fn floor_activations(&self) -> u64 {
        self.floor_hits.load(Ordering::Relaxed)
    }

    pub fn set_multiplier(&mut self, c: f64) -> Result<()> {
        if !(c >= 1.0 && c.is_finite()) {
            return Err(Error::InvalidParameter(format!("multiplier must be >= 1, got {c}")));
        }
        self.multiplier = c;
        Ok(())
    }

    pub fn with_multiplier(&self, c: f64) -> Result<Self> {
        let mut out = self.clone();
        out.floor_hits = Arc::new(AtomicU64::new(0));
        out.set_multiplier(c)?;
        Ok(out)
    }

    /// Replaces the positivization shift by `shift` (terminal-function units). The regression-point
    /// positivity guarantee no longer holds when `shift` is below the minimum-rule value.
    pub fn with_shift(&self, shift: f64) -> Result<Self> {
        let (idx, kappa) = constant_column(&self.spectrum)?;
        let mut out = self.clone();
        out.floor_hits = Arc::new(AtomicU64::new(0));
        out.coefficients[idx] += (shift - self.positivization.shift) / kappa;
        out.positivization.shift = shift;
        Ok(out)
    }

    /// Basis coefficients of `Phi(T - tau, .)`.
    pub fn basis_coefficients(&self, tau: f64) -> Vec<f64> {
        let mut a = vec![0.0; self.spectrum.basis.len()];
        for (col, f) in self.columns.iter().zip(&self.coefficients) {
            col.accumulate(tau, *f, &mut a);
        }
        a
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(-1e-12..=self.horizon * (1.0 + 1e-12)).contains(&t) {
            return Err(Error::TimeOutOfRange { t, horizon: self.horizon });
        }
        Ok(())
    }

    /// `(Phi(t, x), grad Phi(t, x))`.
    pub fn kbe_value_grad(&self, t: f64, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_time(t)?;
        if x.len() != self.model.dim_state() {
            return Err(Error::Shape(format!("state of length {} for d = {}", x.len(), self.model.dim_state())));
        }
        let a = self.basis_coefficients((self.horizon - t).max(0.0));
        let mut ev = self.spectrum.basis.evaluator();
        self.spectrum.basis.eval_into(x, JetOrder::Gradient, &mut ev);
        let d = x.len();
        let mut grad = vec![0.0; d];
        let mut value = 0.0;
        for (k, ak) in a.iter().enumerate() {
            value += ak * ev.values[k];
            for (g, dg) in grad.iter_mut().zip(ev.grad(k)) {
                *g += ak * dg;
            }
        }
        Ok((value, grad))
    }

    /// `c B(x)^T grad Phi / max(Phi, delta)`.
    pub fn bias_eval(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let (phi, grad) = self.kbe_value_grad(t, x)?;
        let mut u = vec![0.0; self.model.dim_noise()];
        let b = self.model.diffusion(x);
        self.apply(phi, &grad, &b, &mut u);
        Ok(u)
    }

    #[inline]
    fn denominator(&self, phi: f64) -> f64 {
        if phi < self.floor {
            self.floor_hits.fetch_add(1, Ordering::Relaxed);
            self.floor
        } else {
            phi
        }
    }

    #[inline]
    fn apply(&self, phi: f64, grad: &[f64], b: &[f64], u: &mut [f64]) {
        let r = u.len();
        let scale = self.multiplier / self.denominator(phi);
        for (j, uj) in u.iter_mut().enumerate() {
            *uj = scale * grad.iter().enumerate().map(|(i, g)| b[i * r + j] * g).sum::<f64>();
        }
    }

    /// Tabulates the time-dependent coefficients on `grid` for fast evaluation inside path loops.
    pub fn prepare(&self, grid: &TimeGrid) -> Result<PreparedDoob<'_>> {
        if (grid.horizon - self.horizon).abs() > 1e-12 * self.horizon {
            return Err(Error::Config(format!("controller horizon {} differs from ensemble horizon {}", self.horizon, grid.horizon)));
        }
        let n = self.spectrum.basis.len();
        let mut table = Vec::with_capacity((grid.steps + 1) * n);
        for k in 0..=grid.steps {
            table.extend(self.basis_coefficients(self.horizon - grid.time(k)));
        }
        Ok(PreparedDoob { ctl: self, grid: *grid, table, n })
    }
}

/// A [`DoobController`] bound to one time grid.
pub struct PreparedDoob<'a> {
    ctl: &'a DoobController,
    grid: TimeGrid,
    table: Vec<f64>,
    n: usize,
}

pub struct DoobWorkspace {
    ev: BasisEval,
    grad: Vec<f64>,
    b: Vec<f64>,
}

impl PreparedDoob<'_> {
    pub fn controller(&self) -> &DoobController {
        self.ctl
    }

    #[inline]
    fn phi_grad(&self, ws: &mut DoobWorkspace, step: usize, x: &[f64], order: JetOrder) -> f64 {
        let basis = &self.ctl.spectrum.basis;
        basis.eval_into(x, order, &mut ws.ev);
        let a = &self.table[step * self.n..(step + 1) * self.n];
        let mut phi = 0.0;
        ws.grad.fill(0.0);
        for (k, ak) in a.iter().enumerate() {
            phi += ak * ws.ev.values[k];
            for (g, dg) in ws.grad.iter_mut().zip(ws.ev.grad(k)) {
                *g += ak * dg;
            }
        }
        phi
    }
}

impl Control for PreparedDoob<'_> {
    type Workspace = DoobWorkspace;

    fn noise_dim(&self) -> usize {
        self.ctl.model.dim_noise()
    }

    fn workspace(&self) -> DoobWorkspace {
        let m = &self.ctl.model;
        DoobWorkspace { ev: self.ctl.spectrum.basis.evaluator(), grad: vec![0.0; m.dim_state()], b: vec![0.0; m.dim_state() * m.dim_noise()] }
    }

    fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if grid.steps != self.grid.steps || (grid.horizon - self.grid.horizon).abs() > 1e-12 * self.grid.horizon {
            return Err(Error::Config("controller was prepared for a different time grid".into()));
        }
        Ok(())
    }

    #[inline]
    fn bias(&self, ws: &mut DoobWorkspace, step: usize, _t: f64, x: &[f64], u: &mut [f64]) {
        let phi = self.phi_grad(ws, step, x, JetOrder::Gradient);
        self.ctl.model.diffusion_into(x, &mut ws.b);
        self.ctl.apply(phi, &ws.grad, &ws.b, u);
    }

    fn supports_jacobian(&self) -> bool {
        self.ctl.model.is_additive()
    }

    fn bias_jacobian(&self, ws: &mut DoobWorkspace, step: usize, _t: f64, x: &[f64], u: &mut [f64], jac: &mut [f64]) {
        let phi = self.phi_grad(ws, step, x, JetOrder::Hessian);
        let d = x.len();
        let a = &self.table[step * self.n..(step + 1) * self.n];
        let mut hess = vec![0.0; d * d];
        for (k, ak) in a.iter().enumerate() {
            for (h, dh) in hess.iter_mut().zip(ws.ev.hessian(k)) {
                *h += ak * dh;
            }
        }
        self.ctl.model.diffusion_into(x, &mut ws.b);
        let r = u.len();
        let floored = phi < self.ctl.floor;
        let den = self.ctl.denominator(phi);
        let c = self.ctl.multiplier;
        for j in 0..r {
            u[j] = c / den * (0..d).map(|i| ws.b[i * r + j] * ws.grad[i]).sum::<f64>();
            for l in 0..d {
                // d/dx_l of B^T grad / phi (B constant)
                let bh: f64 = (0..d).map(|i| ws.b[i * r + j] * hess[i * d + l]).sum();
                let bg: f64 = (0..d).map(|i| ws.b[i * r + j] * ws.grad[i]).sum();
                jac[j * d + l] = if floored { c * bh / den } else { c * (bh / phi - bg * ws.grad[l] / (phi * phi)) };
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub c: f64,
    pub proportion_in_event: f64,
    pub estimate: f64,
    pub variance: f64,
    pub relative_error: f64,
    pub blowup_count: usize,
}

impl SweepRow {
    fn from_report(c: f64, r: &EstimatorReport) -> SweepRow {
        SweepRow {
            c,
            proportion_in_event: r.proportion_in_event,
            estimate: r.estimate,
            variance: r.sample_variance,
            relative_error: r.relative_error,
            blowup_count: r.blowup_count,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Tuning {
    pub chosen: f64,
    pub sweep: Vec<SweepRow>,
}

/// Runs `batch` paths per multiplier and returns the one whose event-hit fraction is
/// closest to `target` (ties go to the smaller c), plus the full sweep table.
pub fn tune_multiplier(controller: &DoobController, ens: &EnsembleSpec<'_>, grid: &[f64], batch: usize, target: f64) -> Result<Tuning> {
    if grid.is_empty() {
        return Err(Error::Config("multiplier grid is empty".into()));
    }
    if batch < 50 {
        return Err(Error::Config(format!("tuning batch must be at least 50, got {batch}")));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let spec = EnsembleSpec { samples: batch, ..*ens };
    let mut sweep = Vec::with_capacity(sorted.len());
    for &c in &sorted {
        let ctl = controller.with_multiplier(c)?;
        let prepared = ctl.prepare(&spec.grid)?;
        let report = run_ensemble(&spec, Some(&prepared))?.report;
        sweep.push(SweepRow::from_report(c, &report));
    }
    if sweep.iter().all(|r| r.proportion_in_event == 0.0) {
        return Err(Error::TuningFailed { grid: sorted });
    }
    let mut best = &sweep[0];
    for row in &sweep[1..] {
        if (row.proportion_in_event - target).abs() < (best.proportion_in_event - target).abs() {
            best = row;
        }
    }
    Ok(Tuning { chosen: best.c, sweep })
}

/// Sweep table without selection (the `sweep-c` verb).
pub fn sweep_multipliers(controller: &DoobController, ens: &EnsembleSpec<'_>, grid: &[f64]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    for &c in grid {
        let ctl = controller.with_multiplier(c)?;
        let prepared = ctl.prepare(&ens.grid)?;
        rows.push(SweepRow::from_report(c, &run_ensemble(ens, Some(&prepared))?.report));
    }
    Ok(rows)
}

/// Bisects the positivization shift so that, at the controller's multiplier, the event-hit
/// fraction over `batch` paths (common random numbers) matches `target`. Returns the
/// adjusted controller and the shift.
pub fn tune_offset(controller: &DoobController, ens: &EnsembleSpec<'_>, batch: usize, target: f64, iterations: usize) -> Result<(DoobController, f64)> {
    if !(0.0..1.0).contains(&target) || target == 0.0 {
        return Err(Error::Config(format!("offset target fraction must lie in (0, 1), got {target}")));
    }
    let spec = EnsembleSpec { samples: batch, ..*ens };
    // An ensemble lost to blowups counts as over-biased, which pushes the shift up.
    let fraction = |shift: f64| -> Result<f64> {
        let ctl = controller.with_shift(shift)?;
        let prepared = ctl.prepare(&spec.grid)?;
        match run_ensemble(&spec, Some(&prepared)) {
            Ok(out) if out.report.blowup_count * 2 <= batch => Ok(out.report.proportion_in_event),
            Ok(_) | Err(Error::Numerical(_)) => Ok(1.0),
            Err(e) => Err(e),
        }
    };
    // Phi(0, x0) is affine in the shift with unit slope.
    let phi0 = controller.kbe_value_grad(0.0, ens.x0)?.0 - controller.positivization.shift;
    let scale = controller.positivization.max_abs_fitted.max(phi0.abs()).max(f64::MIN_POSITIVE);
    let mut lo = -phi0 + 1e-3 * scale;
    let mut hi = controller.positivization.shift.max(lo + scale);
    if fraction(lo)? < target {
        return Err(Error::TuningFailed { grid: vec![controller.multiplier] });
    }
    let mut grow = 0;
    while fraction(hi)? >= target {
        hi = lo + 2.0 * (hi - lo);
        grow += 1;
        if grow > 40 {
            return Err(Error::Numerical("offset bisection could not bracket the target fraction".into()));
        }
    }
    for _ in 0..iterations {
        let mid = 0.5 * (lo + hi);
        if fraction(mid)? >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let shift = 0.5 * (lo + hi);
    Ok((controller.with_shift(shift)?, shift))
}
