//! Path simulation of controlled SDEs with per-path noise streams and Girsanov log-weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EventObservable, SdeModel};

/// Standard normal draws for one path.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    #[inline]
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    #[inline]
    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.rng.sample(StandardNormal);
        }
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }
}

/// Stream `path_index` of the ChaCha8 generator seeded with `master_seed`.
pub fn derive_path_rng(master_seed: u64, path_index: u64) -> NoiseStream {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(path_index);
    NoiseStream { rng }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    EulerMaruyama,
    /// Stochastic Heun predictor-corrector; weak order 2 for additive noise.
    SrkAdditive,
}

impl Scheme {
    pub fn default_for(model: &SdeModel) -> Scheme {
        if model.is_additive() {
            Scheme::SrkAdditive
        } else {
            Scheme::EulerMaruyama
        }
    }
}

/// How the stochastic integral in the log-weight is discretized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightRule {
    /// `-sum <u_k, dW_k> - 1/2 sum |u_k|^2 dt` with u at the left endpoint.
    #[default]
    Ito,
    /// Ito rule plus the first-order correction `-1/2 sum_ij (J B)_ij (dW_i dW_j - delta_ij dt)`,
    /// `J = du/dx`. Needs a control that supplies its Jacobian.
    Milstein,
}

/// Uniform grid on `[0, T]` with `steps * dt = T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
    pub dt: f64,
}

impl TimeGrid {
    /// Rounds the step count up and shrinks dt so the grid ends exactly at the horizon.
    pub fn new(horizon: f64, dt: f64) -> Result<TimeGrid> {
        if !(dt > 0.0 && dt.is_finite()) || !(horizon >= 0.0 && horizon.is_finite()) {
            return Err(Error::Config(format!("need dt > 0 and T >= 0, got dt = {dt}, T = {horizon}")));
        }
        let ratio = horizon / dt;
        let steps = if (ratio - ratio.round()).abs() < 1e-9 * ratio.max(1.0) { ratio.round() } else { ratio.ceil() } as usize;
        let dt = if steps == 0 { dt } else { horizon / steps as f64 };
        Ok(TimeGrid { horizon, steps, dt })
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt
        }
    }
}

/// A feedback control `u(t_k, x)` evaluated on a fixed time grid.
pub trait Control: Sync {
    type Workspace: Send;

    fn noise_dim(&self) -> usize;

    fn workspace(&self) -> Self::Workspace;

    /// Fails when the control was prepared for a different horizon or grid.
    fn check_grid(&self, _grid: &TimeGrid) -> Result<()> {
        Ok(())
    }

    fn bias(&self, ws: &mut Self::Workspace, step: usize, t: f64, x: &[f64], u: &mut [f64]);

    fn supports_jacobian(&self) -> bool {
        false
    }

    /// Writes `u` and the row-major `r x d` Jacobian `du/dx`.
    fn bias_jacobian(&self, ws: &mut Self::Workspace, step: usize, t: f64, x: &[f64], u: &mut [f64], jac: &mut [f64]) {
        let _ = (ws, step, t, x, u, jac);
        unimplemented!("this control has no Jacobian")
    }
}

/// The zero control; simulations with it take the uncontrolled code path.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoControl;

impl Control for NoControl {
    type Workspace = ();
    fn noise_dim(&self) -> usize {
        0
    }
    fn workspace(&self) {}
    fn bias(&self, _ws: &mut (), _step: usize, _t: f64, _x: &[f64], u: &mut [f64]) {
        u.fill(0.0);
    }
}

/// Scratch buffers for one-step integration.
#[derive(Clone, Debug)]
pub struct Stepper {
    d: usize,
    r: usize,
    a0: Vec<f64>,
    a1: Vec<f64>,
    b: Vec<f64>,
    bu: Vec<f64>,
    bdw: Vec<f64>,
    stage: Vec<f64>,
}

impl Stepper {
    pub fn new(model: &SdeModel) -> Stepper {
        let (d, r) = (model.dim_state(), model.dim_noise());
        Stepper {
            d,
            r,
            a0: vec![0.0; d],
            a1: vec![0.0; d],
            b: vec![0.0; d * r],
            bu: vec![0.0; d],
            bdw: vec![0.0; d],
            stage: vec![0.0; d],
        }
    }

    fn mat_vec(b: &[f64], v: &[f64], r: usize, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = b[i * r..(i + 1) * r].iter().zip(v).map(|(b, v)| b * v).sum();
        }
    }

    /// Advances `x` in place by one step driven by Brownian increment `dw` (length r).
    #[inline]
    pub fn step(&mut self, model: &SdeModel, scheme: Scheme, x: &mut [f64], u: Option<&[f64]>, dt: f64, dw: &[f64]) {
        let (d, r) = (self.d, self.r);
        model.diffusion_into(x, &mut self.b);
        Self::mat_vec(&self.b, dw, r, &mut self.bdw);
        match u {
            Some(u) => Self::mat_vec(&self.b, u, r, &mut self.bu),
            None => self.bu.fill(0.0),
        }
        model.drift_into(x, &mut self.a0);
        match scheme {
            Scheme::EulerMaruyama => {
                for i in 0..d {
                    x[i] += (self.a0[i] + self.bu[i]) * dt + self.bdw[i];
                }
            }
            Scheme::SrkAdditive => {
                for i in 0..d {
                    self.stage[i] = x[i] + (self.a0[i] + self.bu[i]) * dt + self.bdw[i];
                }
                model.drift_into(&self.stage, &mut self.a1);
                for i in 0..d {
                    x[i] += (0.5 * (self.a0[i] + self.a1[i]) + self.bu[i]) * dt + self.bdw[i];
                }
            }
        }
    }
}

/// One step of the controlled system with drift `A(x) + B(x) u` and noise `B(x) sqrt(dt) xi`.
pub fn integrate_step(model: &SdeModel, scheme: Scheme, x: &[f64], u: &[f64], dt: f64, xi: &[f64]) -> Result<Vec<f64>> {
    let (d, r) = (model.dim_state(), model.dim_noise());
    if x.len() != d || u.len() != r || xi.len() != r {
        return Err(Error::Shape(format!("step on d={d}, r={r} with x {}, u {}, xi {}", x.len(), u.len(), xi.len())));
    }
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    check_scheme(model, scheme)?;
    let dw: Vec<f64> = xi.iter().map(|v| v * dt.sqrt()).collect();
    let mut next = x.to_vec();
    Stepper::new(model).step(model, scheme, &mut next, Some(u), dt, &dw);
    Ok(next)
}

pub fn check_scheme(model: &SdeModel, scheme: Scheme) -> Result<()> {
    if scheme == Scheme::SrkAdditive && !model.is_additive() {
        return Err(Error::Unsupported(format!(
            "srk_additive needs state-independent diffusion; model `{}` is multiplicative",
            model.name()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathResult {
    pub terminal_state: Vec<f64>,
    pub log_weight: f64,
    pub in_event: bool,
    pub path_index: u64,
    pub trajectory: Option<Vec<(f64, Vec<f64>)>>,
}

/// Everything about a path except the control and the noise.
#[derive(Clone, Copy, Debug)]
pub struct PathSetup<'a> {
    pub model: &'a SdeModel,
    pub obs: &'a EventObservable,
    pub x0: &'a [f64],
    pub grid: TimeGrid,
    pub scheme: Scheme,
    pub weight_rule: WeightRule,
    /// Record every `n`-th state (including t = 0) when set.
    pub record_stride: Option<usize>,
}

impl PathSetup<'_> {
    pub fn validate<C: Control>(&self, control: Option<&C>) -> Result<()> {
        let (d, r) = (self.model.dim_state(), self.model.dim_noise());
        if self.x0.len() != d {
            return Err(Error::Shape(format!("x0 has length {} for d = {d}", self.x0.len())));
        }
        self.obs.margin.check_dim(d)?;
        check_scheme(self.model, self.scheme)?;
        if self.record_stride == Some(0) {
            return Err(Error::Config("trajectory stride must be positive".into()));
        }
        if let Some(c) = control {
            if c.noise_dim() != r {
                return Err(Error::Shape(format!("control has dimension {} for r = {r}", c.noise_dim())));
            }
            c.check_grid(&self.grid)?;
            if self.weight_rule == WeightRule::Milstein && !c.supports_jacobian() {
                return Err(Error::Unsupported("Milstein weight rule needs a control with a Jacobian".into()));
            }
        }
        Ok(())
    }
}

/// Simulates one path. The log-weight uses exactly the increments that drove the path.
pub fn simulate_path<C: Control>(setup: &PathSetup<'_>, control: Option<&C>, rng: &mut NoiseStream, path_index: u64) -> Result<PathResult> {
    let model = setup.model;
    let (d, r) = (model.dim_state(), model.dim_noise());
    let grid = setup.grid;
    let dt = grid.dt;
    let sq = dt.sqrt();
    let mut x = setup.x0.to_vec();
    let mut stepper = Stepper::new(model);
    let mut dw = vec![0.0; r];
    let mut u = vec![0.0; r];
    let milstein = setup.weight_rule == WeightRule::Milstein;
    let mut jac = vec![0.0; if milstein { r * d } else { 0 }];
    let mut jb = vec![0.0; if milstein { r * r } else { 0 }];
    let mut b = vec![0.0; if milstein { d * r } else { 0 }];
    let mut ws = control.map(|c| c.workspace());
    let mut log_weight = 0.0;
    let mut trajectory = setup.record_stride.map(|_| Vec::new());
    for k in 0..grid.steps {
        if let (Some(s), Some(tr)) = (setup.record_stride, trajectory.as_mut()) {
            if k % s == 0 {
                tr.push((grid.time(k), x.clone()));
            }
        }
        rng.fill_normal(&mut dw);
        for v in dw.iter_mut() {
            *v *= sq;
        }
        let t = grid.time(k);
        match (control, ws.as_mut()) {
            (Some(c), Some(ws)) => {
                if milstein {
                    c.bias_jacobian(ws, k, t, &x, &mut u, &mut jac);
                    model.diffusion_into(&x, &mut b);
                    for i in 0..r {
                        for j in 0..r {
                            jb[i * r + j] = (0..d).map(|l| jac[i * d + l] * b[l * r + j]).sum();
                        }
                    }
                    let mut corr = 0.0;
                    for i in 0..r {
                        for j in 0..r {
                            let ito = dw[i] * dw[j] - if i == j { dt } else { 0.0 };
                            corr += jb[i * r + j] * ito;
                        }
                    }
                    log_weight -= 0.5 * corr;
                } else {
                    c.bias(ws, k, t, &x, &mut u);
                }
                let mut dot = 0.0;
                let mut sq_norm = 0.0;
                for i in 0..r {
                    dot += u[i] * dw[i];
                    sq_norm += u[i] * u[i];
                }
                log_weight += -dot - 0.5 * sq_norm * dt;
                stepper.step(model, setup.scheme, &mut x, Some(&u), dt, &dw);
            }
            _ => stepper.step(model, setup.scheme, &mut x, None, dt, &dw),
        }
        if !x.iter().all(|v| v.is_finite()) || !log_weight.is_finite() && log_weight != f64::NEG_INFINITY {
            return Err(Error::PathBlowup { path: path_index, step: k + 1 });
        }
    }
    if let (Some(s), Some(tr)) = (setup.record_stride, trajectory.as_mut()) {
        if grid.steps % s == 0 {
            tr.push((grid.horizon, x.clone()));
        }
    }
    Ok(PathResult { in_event: setup.obs.in_event(&x), terminal_state: x, log_weight, path_index, trajectory })
}

pub fn simulate_uncontrolled(setup: &PathSetup<'_>, rng: &mut NoiseStream, path_index: u64) -> Result<PathResult> {
    simulate_path::<NoControl>(setup, None, rng, path_index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_builtin_model, Margin};
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn ou() -> SdeModel {
        make_builtin_model("ou1d", &BTreeMap::new()).unwrap()
    }

    #[test]
    fn streams_are_deterministic_and_distinct() {
        let draw = |s, i| {
            let mut r = derive_path_rng(s, i);
            (0..1000).map(|_| r.normal()).collect::<Vec<f64>>()
        };
        assert_eq!(draw(42, 7), draw(42, 7));
        let (a, b) = (draw(42, 7), draw(42, 8));
        assert!(a.iter().zip(&b).filter(|(x, y)| x != y).count() > 990);
    }

    #[test]
    fn stream_mean_clt() {
        let mut r = derive_path_rng(3, 0);
        let n = 1_000_000;
        let mean = (0..n).map(|_| r.normal()).sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn euler_step_by_hand() {
        let next = integrate_step(&ou(), Scheme::EulerMaruyama, &[1.0], &[0.0], 0.01, &[0.0]).unwrap();
        assert_eq!(next, vec![0.99]);
    }

    #[test]
    fn heun_step_by_hand() {
        // x + dt/2 (-x - (x - x dt)) = x (1 - dt + dt^2/2)
        let next = integrate_step(&ou(), Scheme::SrkAdditive, &[1.0], &[0.0], 0.1, &[0.0]).unwrap();
        assert!((next[0] - (1.0 - 0.1 + 0.005)).abs() < 1e-15);
    }

    #[test]
    fn control_enters_through_diffusion() {
        let next = integrate_step(&ou(), Scheme::EulerMaruyama, &[0.0], &[1.0], 0.5, &[0.0]).unwrap();
        assert!((next[0] - 0.5 * 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn deterministic_decay() {
        let drift: crate::model::Field = Arc::new(|x: &[f64], o: &mut [f64]| o[0] = -x[0]);
        let zero: crate::model::Field = Arc::new(|_x: &[f64], o: &mut [f64]| o[0] = 0.0);
        let m = SdeModel::new("decay", 1, 1, drift, zero, true);
        let obs = EventObservable::indicator(Margin::HalfSpace { coord: 0, threshold: 0.0 });
        let setup = PathSetup {
            model: &m,
            obs: &obs,
            x0: &[1.0],
            grid: TimeGrid::new(1.0, 1e-4).unwrap(),
            scheme: Scheme::EulerMaruyama,
            weight_rule: WeightRule::Ito,
            record_stride: None,
        };
        let p = simulate_uncontrolled(&setup, &mut derive_path_rng(1, 0), 0).unwrap();
        assert!((p.terminal_state[0] - (-1f64).exp()).abs() < 1e-3);
        assert_eq!(p.log_weight, 0.0);
    }

    #[test]
    fn grid_rounding() {
        let g = TimeGrid::new(1.0, 0.3).unwrap();
        assert_eq!(g.steps, 4);
        assert!((g.dt - 0.25).abs() < 1e-15);
        let g = TimeGrid::new(10.0, 0.02).unwrap();
        assert_eq!(g.steps, 500);
        assert_eq!(TimeGrid::new(0.0, 0.1).unwrap().steps, 0);
    }

    #[test]
    fn srk_rejects_multiplicative_noise() {
        let f: crate::model::Field = Arc::new(|x: &[f64], o: &mut [f64]| o[0] = x[0]);
        let m = SdeModel::new("gbm", 1, 1, f.clone(), f, false);
        assert!(matches!(integrate_step(&m, Scheme::SrkAdditive, &[1.0], &[0.0], 0.1, &[0.0]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn trajectory_includes_both_ends() {
        let m = ou();
        let obs = EventObservable::indicator(Margin::HalfSpace { coord: 0, threshold: 2.0 });
        let setup = PathSetup {
            model: &m,
            obs: &obs,
            x0: &[0.5],
            grid: TimeGrid::new(1.0, 0.01).unwrap(),
            scheme: Scheme::SrkAdditive,
            weight_rule: WeightRule::Ito,
            record_stride: Some(10),
        };
        let p = simulate_uncontrolled(&setup, &mut derive_path_rng(9, 2), 2).unwrap();
        let tr = p.trajectory.unwrap();
        assert_eq!(tr.len(), 11);
        assert_eq!(tr[0], (0.0, vec![0.5]));
        assert_eq!(tr[10].1, p.terminal_state);
        assert_eq!(p.in_event, obs.in_event(&p.terminal_state));
    }

    #[test]
    fn blowup_reports_step() {
        let drift: crate::model::Field = Arc::new(|x: &[f64], o: &mut [f64]| o[0] = x[0] * x[0] * 1e3);
        let one: crate::model::Field = Arc::new(|_x: &[f64], o: &mut [f64]| o[0] = 0.0);
        let m = SdeModel::new("explode", 1, 1, drift, one, true);
        let obs = EventObservable::indicator(Margin::HalfSpace { coord: 0, threshold: 0.0 });
        let setup = PathSetup {
            model: &m,
            obs: &obs,
            x0: &[10.0],
            grid: TimeGrid::new(1.0, 0.1).unwrap(),
            scheme: Scheme::EulerMaruyama,
            weight_rule: WeightRule::Ito,
            record_stride: None,
        };
        let err = simulate_uncontrolled(&setup, &mut derive_path_rng(0, 0), 5).unwrap_err();
        assert!(matches!(err, Error::PathBlowup { path: 5, step } if step > 1));
    }
}
