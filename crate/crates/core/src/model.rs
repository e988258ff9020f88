//! SDE models `dX = A(X) dt + B(X) dW` and terminal-time rare-event observables.

use std::collections::BTreeMap;
use std::f64::consts::SQRT_2;
use std::fmt;
use std::sync::Arc;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spde::SpectralSpde;

/// Vector field `x -> out`; diffusion fields write a row-major `d x r` matrix.
pub type Field = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

pub const BUILTIN_MODELS: [&str; 6] = ["ou1d", "nonnormal2d", "brownian_osc", "advdiff", "vdp", "duffing"];

/// Constant-coefficient form `A(x) = A_lin x`, `B(x) = B_lin`.
#[derive(Clone, Debug)]
pub struct LinearSpec {
    pub drift: Mat<f64>,
    pub diffusion: Mat<f64>,
}

#[derive(Clone)]
pub struct SdeModel {
    name: String,
    params: BTreeMap<String, f64>,
    dim_state: usize,
    dim_noise: usize,
    drift: Field,
    diffusion: Field,
    additive: bool,
    linear: Option<LinearSpec>,
}

impl fmt::Debug for SdeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeModel")
            .field("name", &self.name)
            .field("params", &self.params)
            .field("dim_state", &self.dim_state)
            .field("dim_noise", &self.dim_noise)
            .field("additive", &self.additive)
            .field("linear", &self.linear.is_some())
            .finish()
    }
}

impl SdeModel {
    /// Custom model from closures. `additive` declares that the diffusion does not depend on x.
    pub fn new(name: impl Into<String>, dim_state: usize, dim_noise: usize, drift: Field, diffusion: Field, additive: bool) -> Self {
        SdeModel {
            name: name.into(),
            params: BTreeMap::new(),
            dim_state,
            dim_noise,
            drift,
            diffusion,
            additive,
            linear: None,
        }
    }

    /// Linear model with drift `a x` and constant diffusion `b`.
    pub fn linear(name: impl Into<String>, a: Mat<f64>, b: Mat<f64>) -> Result<Self> {
        let d = a.nrows();
        if a.ncols() != d || b.nrows() != d || b.ncols() == 0 {
            return Err(Error::Shape(format!(
                "linear model needs A d x d and B d x r, got {}x{} and {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        let r = b.ncols();
        let a_rows: Vec<f64> = (0..d * d).map(|k| a[(k / d, k % d)]).collect();
        let b_rows: Vec<f64> = (0..d * r).map(|k| b[(k / r, k % r)]).collect();
        let drift: Field = Arc::new(move |x: &[f64], out: &mut [f64]| {
            for i in 0..d {
                let row = &a_rows[i * d..(i + 1) * d];
                out[i] = row.iter().zip(x).map(|(a, x)| a * x).sum();
            }
        });
        let diffusion: Field = Arc::new(move |_x: &[f64], out: &mut [f64]| out.copy_from_slice(&b_rows));
        let mut model = SdeModel::new(name, d, r, drift, diffusion, true);
        model.linear = Some(LinearSpec { drift: a, diffusion: b });
        Ok(model)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Parameters after defaults were filled in (empty for custom models).
    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn dim_noise(&self) -> usize {
        self.dim_noise
    }

    pub fn is_additive(&self) -> bool {
        self.additive
    }

    pub fn linear_spec(&self) -> Option<&LinearSpec> {
        self.linear.as_ref()
    }

    pub fn is_builtin(&self) -> bool {
        BUILTIN_MODELS.contains(&self.name.as_str())
    }

    #[inline]
    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }

    #[inline]
    pub fn diffusion_into(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out)
    }

    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_state];
        self.drift_into(x, &mut out);
        out
    }

    /// Row-major `d x r` diffusion matrix at x.
    pub fn diffusion(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_state * self.dim_noise];
        self.diffusion_into(x, &mut out);
        out
    }
}

fn take_params(name: &str, given: &BTreeMap<String, f64>, defaults: &[(&str, f64)]) -> Result<BTreeMap<String, f64>> {
    for key in given.keys() {
        if !defaults.iter().any(|(k, _)| k == key) {
            let known: Vec<&str> = defaults.iter().map(|(k, _)| *k).collect();
            return Err(Error::InvalidParameter(format!("model `{name}` has no parameter `{key}` (known: {known:?})")));
        }
    }
    let mut out = BTreeMap::new();
    for (k, v) in defaults {
        let value = given.get(*k).copied().unwrap_or(*v);
        if !value.is_finite() {
            return Err(Error::InvalidParameter(format!("{name}.{k} = {value} is not finite")));
        }
        out.insert((*k).to_string(), value);
    }
    Ok(out)
}

fn require_positive(name: &str, p: &BTreeMap<String, f64>, keys: &[&str]) -> Result<()> {
    for k in keys {
        if p[*k] <= 0.0 {
            return Err(Error::InvalidParameter(format!("{name}.{k} must be positive, got {}", p[*k])));
        }
    }
    Ok(())
}

fn mat(rows: usize, cols: usize, data: &[f64]) -> Mat<f64> {
    Mat::from_fn(rows, cols, |i, j| data[i * cols + j])
}

/// Builds one of the six benchmark systems. Missing parameters take their default values.
pub fn make_builtin_model(name: &str, params: &BTreeMap<String, f64>) -> Result<SdeModel> {
    let mut model = match name {
        "ou1d" => {
            let p = take_params(name, params, &[("theta", 1.0), ("sigma", SQRT_2)])?;
            require_positive(name, &p, &["theta", "sigma"])?;
            let m = SdeModel::linear(name, mat(1, 1, &[-p["theta"]]), mat(1, 1, &[p["sigma"]]))?;
            (m, p)
        }
        "nonnormal2d" => {
            let p = take_params(name, params, &[("a11", -1.0), ("a12", 0.0), ("a21", 1.0), ("a22", -0.3), ("noise", 0.1)])?;
            require_positive(name, &p, &["noise"])?;
            let a = mat(2, 2, &[p["a11"], p["a12"], p["a21"], p["a22"]]);
            let s = p["noise"];
            let m = SdeModel::linear(name, a, mat(2, 2, &[s, 0.0, 0.0, s]))?;
            (m, p)
        }
        "brownian_osc" => {
            let p = take_params(name, params, &[("omega0", 1.0), ("zeta", 0.5), ("sigma", 1.0)])?;
            require_positive(name, &p, &["omega0", "zeta", "sigma"])?;
            let w = p["omega0"];
            let a = mat(2, 2, &[0.0, 1.0, -w * w, -2.0 * p["zeta"] * w]);
            let m = SdeModel::linear(name, a, mat(2, 1, &[0.0, p["sigma"]]))?;
            (m, p)
        }
        "advdiff" => {
            let p = take_params(name, params, &[("b", 1.0), ("alpha", 0.1), ("eps", 1.0), ("n_modes", 64.0)])?;
            require_positive(name, &p, &["alpha", "eps"])?;
            let n = p["n_modes"];
            if n.fract() != 0.0 || n < 2.0 {
                return Err(Error::InvalidParameter(format!("advdiff.n_modes must be an integer >= 2, got {n}")));
            }
            let spde = SpectralSpde::new(n as usize, p["alpha"], p["b"], p["eps"])?;
            (spde.to_model()?, p)
        }
        "vdp" => {
            let p = take_params(name, params, &[("mu", 0.3), ("eps", 0.01)])?;
            require_positive(name, &p, &["eps"])?;
            if p["mu"] < 0.0 {
                return Err(Error::InvalidParameter(format!("vdp.mu must be nonnegative, got {}", p["mu"])));
            }
            let mu = p["mu"];
            let s = (2.0 * p["eps"]).sqrt();
            let drift: Field = Arc::new(move |x: &[f64], out: &mut [f64]| {
                out[0] = x[1];
                out[1] = mu * (1.0 - x[0] * x[0]) * x[1] - x[0];
            });
            let diffusion: Field = Arc::new(move |_x: &[f64], out: &mut [f64]| out.copy_from_slice(&[s, 0.0, 0.0, s]));
            (SdeModel::new(name, 2, 2, drift, diffusion, true), p)
        }
        "duffing" => {
            let p = take_params(name, params, &[("alpha", 1.0), ("beta", -1.0), ("delta", 0.5), ("eps", 0.0025)])?;
            require_positive(name, &p, &["delta", "eps"])?;
            let (al, be, de) = (p["alpha"], p["beta"], p["delta"]);
            let s = (2.0 * p["eps"]).sqrt();
            let drift: Field = Arc::new(move |x: &[f64], out: &mut [f64]| {
                out[0] = x[1];
                out[1] = -de * x[1] - x[0] * (be + al * x[0] * x[0]);
            });
            let diffusion: Field = Arc::new(move |_x: &[f64], out: &mut [f64]| out.copy_from_slice(&[0.0, s]));
            (SdeModel::new(name, 2, 1, drift, diffusion, true), p)
        }
        other => return Err(Error::ModelNotFound(other.to_string())),
    };
    model.0.params = model.1;
    Ok(model.0)
}

/// Value, gradient and row-major Hessian of a scalar function at a point.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

/// Drift and `Q = B B^T / 2` frozen at one point, for applying the generator to many jets.
pub struct PointGenerator {
    d: usize,
    drift: Vec<f64>,
    q: Vec<f64>,
}

impl PointGenerator {
    pub fn new(model: &SdeModel, x: &[f64]) -> Self {
        let (d, r) = (model.dim_state(), model.dim_noise());
        let drift = model.drift(x);
        let b = model.diffusion(x);
        let mut q = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                q[i * d + j] = 0.5 * (0..r).map(|k| b[i * r + k] * b[j * r + k]).sum::<f64>();
            }
        }
        PointGenerator { d, drift, q }
    }

    #[inline]
    pub fn apply(&self, grad: &[f64], hess: &[f64]) -> f64 {
        let first: f64 = self.drift.iter().zip(grad).map(|(a, g)| a * g).sum();
        let second: f64 = self.q.iter().zip(&hess[..self.d * self.d]).map(|(q, h)| q * h).sum();
        first + second
    }
}

/// `<A(x), grad f> + Tr[B B^T hess f] / 2` for the jet of f at x.
pub fn generator_apply(model: &SdeModel, jet: &Jet, x: &[f64]) -> Result<f64> {
    let d = model.dim_state();
    if x.len() != d || jet.grad.len() != d || jet.hess.len() != d * d {
        return Err(Error::Shape(format!(
            "generator on d={d}: state {}, gradient {}, Hessian {}",
            x.len(),
            jet.grad.len(),
            jet.hess.len()
        )));
    }
    Ok(PointGenerator::new(model, x).apply(&jet.grad, &jet.hess))
}

/// Signed margin `g`: positive inside the event, negative outside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "margin", rename_all = "snake_case")]
pub enum Margin {
    /// `x[coord] > threshold`
    HalfSpace { coord: usize, threshold: f64 },
    /// `|x[coord]| > level`
    AbsCoord { coord: usize, level: f64 },
    /// `||x|| > level`
    NormExterior { level: f64 },
}

impl Margin {
    /// The scalar the event thresholds (`x_j`, `|x_j|` or `||x||`).
    #[inline]
    pub fn statistic(&self, x: &[f64]) -> f64 {
        match *self {
            Margin::HalfSpace { coord, .. } => x[coord],
            Margin::AbsCoord { coord, .. } => x[coord].abs(),
            Margin::NormExterior { .. } => x.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }

    #[inline]
    pub fn level(&self) -> f64 {
        match *self {
            Margin::HalfSpace { threshold, .. } => threshold,
            Margin::AbsCoord { level, .. } | Margin::NormExterior { level } => level,
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.statistic(x) - self.level()
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        match *self {
            Margin::HalfSpace { coord, .. } | Margin::AbsCoord { coord, .. } if coord >= d => {
                Err(Error::Config(format!("event coordinate {coord} out of range for d = {d}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ObsMode {
    #[default]
    Indicator,
    Mollified,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventObservable {
    pub margin: Margin,
    pub sharpness: f64,
    pub mode: ObsMode,
}

pub const DEFAULT_SHARPNESS: f64 = 3.0;

impl EventObservable {
    pub fn indicator(margin: Margin) -> Self {
        EventObservable { margin, sharpness: DEFAULT_SHARPNESS, mode: ObsMode::Indicator }
    }

    pub fn mollified(margin: Margin, sharpness: f64) -> Self {
        EventObservable { margin, sharpness, mode: ObsMode::Mollified }
    }

    pub fn with_mode(&self, mode: ObsMode) -> Self {
        EventObservable { mode, ..self.clone() }
    }

    /// Strict event membership; `g = 0` counts as outside.
    #[inline]
    pub fn in_event(&self, x: &[f64]) -> bool {
        self.margin.eval(x) > 0.0
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self.mode {
            ObsMode::Indicator => f64::from(u8::from(self.in_event(x))),
            ObsMode::Mollified => 0.5 * (1.0 + (self.sharpness * self.margin.eval(x)).tanh()),
        }
    }
}

pub fn observable_eval(obs: &EventObservable, x: &[f64]) -> f64 {
    obs.eval(x)
}
