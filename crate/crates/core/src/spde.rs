//! Stochastic advection-diffusion `v_t = b v_x + alpha v_xx + sqrt(eps) eta` on `[0, 1]` with
//! Dirichlet conditions, projected on the sine basis `e_k = sqrt(2) sin(k pi x)` and advanced by the
//! exponential Euler scheme. Also hosts the two-functional Doob control `{1, phi_2}` and the exact
//! Gaussian law of the discrete chain.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use faer::{Mat, Side};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::doob::{SweepRow, Tuning, FLOOR_SCALE, POSITIVITY_MARGIN};
use crate::error::{Error, Result};
use crate::estimator::{norm_tail_tilted, run_paths, EnsembleOutput, OracleValue};
use crate::linalg::{lstsq, PINV_RTOL};
use crate::model::{EventObservable, Margin, SdeModel};
use crate::paths::{derive_path_rng, NoiseStream, PathResult, TimeGrid};

/// Points of the reconstruction grid for field export.
pub const FIELD_GRID_POINTS: usize = 256;

#[derive(Clone, Debug)]
pub struct SpectralSpde {
    n: usize,
    alpha: f64,
    b: f64,
    eps: f64,
    lambda: Vec<f64>,
    /// Row-major `n x n`, `D[j, k] = <b e_k', e_j>`.
    coupling: Vec<f64>,
    mu1: f64,
    w1: Vec<f64>,
}

/// `<b e_k', e_j>` for 1-based mode numbers.
pub fn coupling_entry(b: f64, j: usize, k: usize) -> f64 {
    if (j + k) % 2 == 0 {
        return 0.0;
    }
    let (j, k) = (j as f64, k as f64);
    4.0 * b * j * k / (j * j - k * k)
}

impl SpectralSpde {
    pub fn new(n: usize, alpha: f64, b: f64, eps: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidParameter(format!("the spectral truncation needs at least 2 modes, got {n}")));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("diffusivity must be positive, got {alpha}")));
        }
        if !(eps > 0.0 && eps.is_finite()) || !b.is_finite() {
            return Err(Error::InvalidParameter(format!("need finite b and positive noise intensity, got b = {b}, eps = {eps}")));
        }
        let lambda: Vec<f64> = (1..=n).map(|k| alpha * (k as f64 * PI).powi(2)).collect();
        let mut coupling = vec![0.0; n * n];
        for j in 0..n {
            for k in 0..n {
                coupling[j * n + k] = coupling_entry(b, j + 1, k + 1);
            }
        }
        let mut spde = SpectralSpde { n, alpha, b, eps, lambda, coupling, mu1: 0.0, w1: vec![0.0; n] };
        let (mu1, w) = spde.leading_adjoint()?;
        // phi_2 = sqrt(2 mu1) <Y, w>^2 - 1 is an exact eigenfunction iff eps |w|^2 = sqrt(2 mu1)
        let scale = ((2.0 * mu1).sqrt() / eps).sqrt();
        spde.mu1 = mu1;
        spde.w1 = w.iter().map(|v| v * scale).collect();
        Ok(spde)
    }

    fn leading_adjoint(&self) -> Result<(f64, Vec<f64>)> {
        let n = self.n;
        let lt = Mat::from_fn(n, n, |i, j| self.operator_entry(j, i));
        let evd = lt.eigen().map_err(|e| Error::Numerical(format!("adjoint eigenproblem: {e:?}")))?;
        let s = evd.S().column_vector();
        let lead = (0..n).max_by(|&a, &b| s[a].re.total_cmp(&s[b].re)).expect("n >= 2");
        let lam = s[lead];
        if lam.im.abs() > 1e-8 * lam.norm() {
            return Err(Error::Numerical(format!("leading eigenvalue {lam} of the advection-diffusion operator is not real")));
        }
        let u = evd.U();
        let big = (0..n).max_by(|&a, &b| u[(a, lead)].norm().total_cmp(&u[(b, lead)].norm())).expect("n >= 2");
        let phase = u[(big, lead)];
        let mut w: Vec<f64> = (0..n).map(|i| (u[(i, lead)] / phase).re).collect();
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut w {
            *v /= norm;
        }
        Ok((-lam.re, w))
    }

    #[inline]
    fn operator_entry(&self, i: usize, j: usize) -> f64 {
        self.coupling[i * self.n + j] - if i == j { self.lambda[i] } else { 0.0 }
    }

    pub fn modes(&self) -> usize {
        self.n
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn advection(&self) -> f64 {
        self.b
    }

    pub fn noise(&self) -> f64 {
        self.eps
    }

    /// `lambda_k = alpha k^2 pi^2`.
    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn coupling(&self) -> Mat<f64> {
        Mat::from_fn(self.n, self.n, |i, j| self.coupling[i * self.n + j])
    }

    /// Leading decay rate of `-diag(lambda) + D`.
    pub fn mu1(&self) -> f64 {
        self.mu1
    }

    /// Leading adjoint eigenvector, scaled so that `eps |w1|^2 = sqrt(2 mu1)`.
    pub fn w1(&self) -> &[f64] {
        &self.w1
    }

    /// The Galerkin operator `-diag(lambda) + D`.
    pub fn operator(&self) -> Mat<f64> {
        Mat::from_fn(self.n, self.n, |i, j| self.operator_entry(i, j))
    }

    /// The projected system as a linear SDE `dY = (-Lambda + D) Y dt + sqrt(eps) dW`.
    pub fn to_model(&self) -> Result<SdeModel> {
        let s = self.eps.sqrt();
        SdeModel::linear("advdiff", self.operator(), Mat::from_fn(self.n, self.n, |i, j| if i == j { s } else { 0.0 }))
    }

    /// `phi_2(Y) = sqrt(2 mu1) <Y, w1>^2 - 1`, eigenvalue `-2 mu1`.
    pub fn phi2(&self, y: &[f64]) -> f64 {
        let p = dot(y, &self.w1);
        (2.0 * self.mu1).sqrt() * p * p - 1.0
    }

    pub fn phi2_grad(&self, y: &[f64]) -> Vec<f64> {
        let p = dot(y, &self.w1);
        let s = 2.0 * (2.0 * self.mu1).sqrt() * p;
        self.w1.iter().map(|w| s * w).collect()
    }

    pub fn stepper(&self, dt: f64) -> Result<ExpEuler> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("time step must be positive, got {dt}")));
        }
        let decay = self.lambda.iter().map(|l| (-l * dt).exp()).collect();
        let gain = self.lambda.iter().map(|l| -(-l * dt).exp_m1() / l).collect();
        let noise_std = self.lambda.iter().map(|l| (self.eps * -(-2.0 * l * dt).exp_m1() / (2.0 * l)).sqrt()).collect();
        Ok(ExpEuler { n: self.n, dt, decay, gain, noise_std, sqrt_eps: self.eps.sqrt() })
    }

    /// Field values `v(x)` on a uniform grid of `points` nodes including both boundaries.
    pub fn field(&self, y: &[f64], points: usize) -> Vec<(f64, f64)> {
        (0..points)
            .map(|i| {
                let x = i as f64 / (points - 1) as f64;
                let v = y.iter().enumerate().map(|(k, c)| c * 2f64.sqrt() * ((k + 1) as f64 * PI * x).sin()).sum();
                (x, v)
            })
            .collect()
    }

    pub fn write_field_csv(&self, snapshots: &[(f64, Vec<f64>)], path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "t,x,v")?;
        for (t, y) in snapshots {
            for (x, v) in self.field(y, FIELD_GRID_POINTS) {
                writeln!(w, "{t},{x},{v}")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Mode variance of the exact chain at stationarity when `b = 0`: `eps / (2 lambda_k)`.
    pub fn stationary_variance(&self) -> Vec<f64> {
        self.lambda.iter().map(|l| self.eps / (2.0 * l)).collect()
    }
}

/// `L^2([0, 1])` norm of the field with sine coefficients `y` (Parseval).
pub fn l2_norm(y: &[f64]) -> f64 {
    y.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-mode coefficients of one exponential Euler step.
#[derive(Clone, Debug)]
pub struct ExpEuler {
    n: usize,
    dt: f64,
    /// `exp(-lambda_i dt)`.
    pub decay: Vec<f64>,
    /// `(1 - exp(-lambda_i dt)) / lambda_i`.
    pub gain: Vec<f64>,
    /// `sqrt(eps (1 - exp(-2 lambda_i dt)) / (2 lambda_i))`.
    pub noise_std: Vec<f64>,
    sqrt_eps: f64,
}

impl ExpEuler {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Scaled per-mode noise for one step.
    pub fn qwiener_increment(&self, rng: &mut NoiseStream, out: &mut [f64]) {
        for (o, s) in out.iter_mut().zip(&self.noise_std) {
            *o = s * rng.normal();
        }
    }

    /// `out = decay * y + gain * (D y + sqrt(eps) u) + noise`.
    pub fn step(&self, spde: &SpectralSpde, y: &[f64], u: Option<&[f64]>, noise: &[f64], out: &mut [f64]) {
        let n = self.n;
        for j in 0..n {
            let row = &spde.coupling[j * n..(j + 1) * n];
            let mut f = 0.0;
            let mut k = (j + 1) % 2;
            while k < n {
                f += row[k] * y[k];
                k += 2;
            }
            if let Some(u) = u {
                f += self.sqrt_eps * u[j];
            }
            out[j] = self.decay[j] * y[j] + self.gain[j] * f + noise[j];
        }
    }

    /// Mean shift `gain * sqrt(eps) u` in units of the step noise, the likelihood-ratio drift.
    #[inline]
    fn shift_ratio(&self, j: usize, u: f64) -> f64 {
        self.gain[j] * self.sqrt_eps * u / self.noise_std[j]
    }
}

/// Convenience wrapper around [`ExpEuler::step`].
pub fn exp_euler_step(spde: &SpectralSpde, y: &[f64], u: Option<&[f64]>, dt: f64, noise: &[f64]) -> Result<Vec<f64>> {
    let st = spde.stepper(dt)?;
    let mut out = vec![0.0; spde.n];
    st.step(spde, y, u, noise, &mut out);
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::PathBlowup { path: 0, step: 1 });
    }
    Ok(out)
}

/// Gaussian law of the uncontrolled chain after `steps` steps from `Y_0 = 0`: returns the
/// covariance, accumulated by doubling `S_{a+b} = P^b S_a P^{bT} + S_b`.
pub fn chain_covariance(spde: &SpectralSpde, dt: f64, steps: usize) -> Result<Mat<f64>> {
    let st = spde.stepper(dt)?;
    let n = spde.n;
    let p = Mat::from_fn(n, n, |i, j| {
        st.gain[i] * spde.coupling[i * n + j] + if i == j { st.decay[i] } else { 0.0 }
    });
    let s1 = Mat::from_fn(n, n, |i, j| if i == j { st.noise_std[i] * st.noise_std[i] } else { 0.0 });
    // propagator and covariance of the current power-of-two block
    let (mut bp, mut bs) = (p, s1);
    let mut acov = Mat::<f64>::zeros(n, n);
    let mut k = steps;
    while k > 0 {
        if k & 1 == 1 {
            acov = &bp * &acov * bp.transpose() + &bs;
        }
        k >>= 1;
        if k > 0 {
            bs = &bp * &bs * bp.transpose() + &bs;
            bp = &bp * &bp;
        }
    }
    if !acov.is_all_finite() {
        return Err(Error::Numerical("chain covariance is not finite; the time step is unstable".into()));
    }
    Ok(Mat::from_fn(n, n, |i, j| 0.5 * (acov[(i, j)] + acov[(j, i)])))
}

/// `P(||Y_T|| >= level)` for the exponential Euler chain started at zero, by tilted sampling of
/// the exact Gaussian terminal law.
pub fn chain_oracle(spde: &SpectralSpde, level: f64, grid: &TimeGrid, samples: usize, seed: u64) -> Result<OracleValue> {
    let cov = chain_covariance(spde, grid.dt, grid.steps)?;
    let evd = cov.self_adjoint_eigen(Side::Lower).map_err(|e| Error::Numerical(format!("covariance eigen: {e:?}")))?;
    let vars: Vec<f64> = evd.S().column_vector().iter().map(|v| v.max(0.0)).collect();
    let mut out = norm_tail_tilted(&vars, level, samples, seed);
    out.method = "exponential Euler chain law, tilted sampling";
    Ok(out)
}

/// Doob control built from `{1, phi_2}`:
/// `Phi(t, Y) = f0 + f2 exp(-2 mu1 (T - t)) phi_2(Y)`, `u = c sqrt(eps) grad Phi / max(Phi, delta)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpdeDoob {
    pub f0: f64,
    pub f2: f64,
    pub multiplier: f64,
    pub floor: f64,
    pub horizon: f64,
    /// Shift added to `f0` by positivization.
    pub shift: f64,
    pub residual_norm: f64,
    #[serde(skip)]
    floor_hits: Arc<AtomicU64>,
}

impl PartialEq for SpdeDoob {
    fn eq(&self, o: &Self) -> bool {
        (self.f0, self.f2, self.multiplier, self.floor, self.horizon, self.shift) == (o.f0, o.f2, o.multiplier, o.floor, o.horizon, o.shift)
    }
}

impl SpdeDoob {
    pub fn new(f0: f64, f2: f64, multiplier: f64, floor: f64, horizon: f64) -> Result<Self> {
        if multiplier < 1.0 || !(horizon > 0.0) || !(floor > 0.0) {
            return Err(Error::InvalidParameter(format!("need c >= 1, T > 0, floor > 0; got c = {multiplier}, T = {horizon}, floor = {floor}")));
        }
        Ok(SpdeDoob { f0, f2, multiplier, floor, horizon, shift: 0.0, residual_norm: 0.0, floor_hits: Arc::default() })
    }

    pub fn with_multiplier(&self, c: f64) -> Result<Self> {
        let mut out = SpdeDoob::new(self.f0, self.f2, c, self.floor, self.horizon)?;
        out.shift = self.shift;
        out.residual_norm = self.residual_norm;
        Ok(out)
    }

    pub fn floor_activations(&self) -> u64 {
        self.floor_hits.load(Ordering::Relaxed)
    }

    pub fn value(&self, spde: &SpectralSpde, t: f64, y: &[f64]) -> f64 {
        self.f0 + self.f2 * (-2.0 * spde.mu1 * (self.horizon - t)).exp() * spde.phi2(y)
    }

    /// Writes the control in mode coordinates.
    pub fn bias(&self, spde: &SpectralSpde, t: f64, y: &[f64], u: &mut [f64]) {
        let a = self.f2 * (-2.0 * spde.mu1 * (self.horizon - t)).exp();
        let p = dot(y, &spde.w1);
        let root = (2.0 * spde.mu1).sqrt();
        let mut phi = self.f0 + a * (root * p * p - 1.0);
        if phi < self.floor {
            self.floor_hits.fetch_add(1, Ordering::Relaxed);
            phi = self.floor;
        }
        let s = self.multiplier * spde.eps.sqrt() * a * 2.0 * root * p / phi;
        for (ui, w) in u.iter_mut().zip(&spde.w1) {
            *ui = s * w;
        }
    }
}

/// Initial conditions along the leading adjoint direction at several amplitudes, advanced
/// without control; every `stride`-th state becomes a regression point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSampling {
    pub amplitudes: Vec<f64>,
    pub replicates: usize,
    pub t_traj: f64,
    pub stride: f64,
    pub dt: f64,
}

impl Default for SnapshotSampling {
    fn default() -> Self {
        SnapshotSampling { amplitudes: (0..=8).map(|i| 0.5 * i as f64).collect(), replicates: 20, t_traj: 1.0, stride: 0.05, dt: 1e-3 }
    }
}

pub fn snapshot_points(spde: &SpectralSpde, sampling: &SnapshotSampling, seed: u64) -> Result<Vec<Vec<f64>>> {
    let st = spde.stepper(sampling.dt)?;
    let grid = TimeGrid::new(sampling.t_traj, sampling.dt)?;
    let every = ((sampling.stride / grid.dt).round() as usize).max(1);
    if sampling.amplitudes.is_empty() || sampling.replicates == 0 {
        return Err(Error::Config("snapshot sampling needs amplitudes and replicates".into()));
    }
    let dir: Vec<f64> = {
        let nw = l2_norm(&spde.w1);
        spde.w1.iter().map(|w| w / nw).collect()
    };
    let jobs: Vec<(usize, f64)> = sampling
        .amplitudes
        .iter()
        .flat_map(|&a| (0..sampling.replicates).map(move |r| (r, a)))
        .collect();
    let chunks: Vec<Vec<Vec<f64>>> = jobs
        .par_iter()
        .enumerate()
        .map(|(idx, &(_, a))| {
            let mut rng = derive_path_rng(seed, idx as u64);
            let mut y: Vec<f64> = dir.iter().map(|d| a * d).collect();
            let mut next = vec![0.0; spde.n];
            let mut noise = vec![0.0; spde.n];
            let mut out = vec![y.clone()];
            for k in 0..grid.steps {
                st.qwiener_increment(&mut rng, &mut noise);
                st.step(spde, &y, None, &noise, &mut next);
                std::mem::swap(&mut y, &mut next);
                if (k + 1) % every == 0 {
                    out.push(y.clone());
                }
            }
            out
        })
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

/// Fits the indicator of `||Y|| >= level` onto `{1, phi_2}` at `points`, positivizes and
/// returns the controller at multiplier 1.
pub fn fit_spde_controller(spde: &SpectralSpde, points: &[Vec<f64>], level: f64, horizon: f64) -> Result<SpdeDoob> {
    if points.is_empty() {
        return Err(Error::Shape("no regression points".into()));
    }
    let obs = EventObservable::indicator(Margin::NormExterior { level });
    let design = Mat::from_fn(points.len(), 2, |j, i| if i == 0 { 1.0 } else { spde.phi2(&points[j]) });
    let f = Mat::from_fn(points.len(), 1, |j, _| obs.eval(&points[j]));
    let sol = lstsq(design.as_ref(), f.as_ref(), PINV_RTOL)?;
    let (f0, f2) = (sol.x[(0, 0)], sol.x[(1, 0)]);
    let fitted: Vec<f64> = points.iter().map(|y| f0 + f2 * spde.phi2(y)).collect();
    let residual_norm = fitted.iter().enumerate().map(|(j, v)| (v - f[(j, 0)]).powi(2)).sum::<f64>().sqrt();
    let min_fitted = fitted.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_abs = fitted.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let margin = POSITIVITY_MARGIN * max_abs;
    let shift = if min_fitted < margin { (-min_fitted).max(0.0) + margin } else { 0.0 };
    let mut ctl = SpdeDoob::new(f0 + shift, f2, 1.0, FLOOR_SCALE * max_abs, horizon)?;
    ctl.shift = shift;
    ctl.residual_norm = residual_norm;
    Ok(ctl)
}

/// One path of the exponential Euler chain from `Y_0 = 0`. Under control the log-weight is the
/// exact Gaussian transition likelihood ratio `sum_k (-a_k . xi_k - |a_k|^2 / 2)` with
/// `a = gain sqrt(eps) u / noise_std`.
pub fn simulate_spde_path(
    spde: &SpectralSpde,
    st: &ExpEuler,
    grid: &TimeGrid,
    obs: &EventObservable,
    control: Option<&SpdeDoob>,
    rng: &mut NoiseStream,
    path_index: u64,
    record_stride: Option<usize>,
) -> Result<PathResult> {
    let n = spde.n;
    let mut y = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut xi = vec![0.0; n];
    let mut noise = vec![0.0; n];
    let mut u = vec![0.0; n];
    let mut log_weight = 0.0;
    let mut trajectory = record_stride.map(|_| Vec::new());
    for k in 0..grid.steps {
        if let (Some(s), Some(tr)) = (record_stride, trajectory.as_mut()) {
            if k % s == 0 {
                tr.push((grid.time(k), y.clone()));
            }
        }
        rng.fill_normal(&mut xi);
        for j in 0..n {
            noise[j] = st.noise_std[j] * xi[j];
        }
        match control {
            Some(c) => {
                c.bias(spde, grid.time(k), &y, &mut u);
                for j in 0..n {
                    let a = st.shift_ratio(j, u[j]);
                    log_weight -= a * xi[j] + 0.5 * a * a;
                }
                st.step(spde, &y, Some(&u), &noise, &mut next);
            }
            None => st.step(spde, &y, None, &noise, &mut next),
        }
        std::mem::swap(&mut y, &mut next);
        if !y.iter().all(|v| v.is_finite()) || log_weight.is_nan() || log_weight == f64::INFINITY {
            return Err(Error::PathBlowup { path: path_index, step: k + 1 });
        }
    }
    if let (Some(s), Some(tr)) = (record_stride, trajectory.as_mut()) {
        if grid.steps % s == 0 {
            tr.push((grid.horizon, y.clone()));
        }
    }
    Ok(PathResult { in_event: obs.in_event(&y), terminal_state: y, log_weight, path_index, trajectory })
}

/// Ensemble for `P(||v(T)|| >= level)`.
pub fn run_spde_ensemble(spde: &SpectralSpde, control: Option<&SpdeDoob>, level: f64, grid: &TimeGrid, samples: usize, seed: u64) -> Result<EnsembleOutput> {
    if let Some(c) = control {
        if (c.horizon - grid.horizon).abs() > 1e-12 * grid.horizon {
            return Err(Error::Config(format!("controller horizon {} differs from ensemble horizon {}", c.horizon, grid.horizon)));
        }
    }
    let st = spde.stepper(grid.dt)?;
    let obs = EventObservable::indicator(Margin::NormExterior { level });
    let method = if control.is_some() { crate::estimator::Method::Is } else { crate::estimator::Method::Mc };
    run_paths(method, &obs, samples, seed, grid.dt, |i, rng| simulate_spde_path(spde, &st, grid, &obs, control, rng, i, None))
}

/// Multiplier selection by event-hit fraction, as for finite-dimensional models.
pub fn tune_spde_multiplier(spde: &SpectralSpde, base: &SpdeDoob, level: f64, grid: &TimeGrid, cgrid: &[f64], batch: usize, seed: u64, target: f64) -> Result<Tuning> {
    if cgrid.is_empty() || batch < 50 {
        return Err(Error::Config(format!("need a nonempty multiplier grid and batch >= 50 (batch {batch})")));
    }
    let mut sorted = cgrid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut sweep = Vec::new();
    for &c in &sorted {
        let r = run_spde_ensemble(spde, Some(&base.with_multiplier(c)?), level, grid, batch, seed)?.report;
        sweep.push(SweepRow {
            c,
            proportion_in_event: r.proportion_in_event,
            estimate: r.estimate,
            variance: r.sample_variance,
            relative_error: r.relative_error,
            blowup_count: r.blowup_count,
        });
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
