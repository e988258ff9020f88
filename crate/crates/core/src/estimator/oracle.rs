//! Closed-form references for linear (Gaussian) models.

use std::f64::consts::PI;

use faer::{Mat, MatRef, Side};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg::{expm, gauss_hermite_normal, KahanSum};
use crate::model::{EventObservable, LinearSpec, Margin, ObsMode, SdeModel};
use crate::paths::{derive_path_rng, Control, TimeGrid};

#[derive(Clone, Debug)]
pub struct GaussianLaw {
    pub mean: Vec<f64>,
    pub cov: Mat<f64>,
}

/// Law of `X_T` for `dX = A X dt + B dW`, `X_0 = x0`. The covariance over a short step `h`
/// comes from Van Loan's block exponential `exp([[-A, B B^T], [0, A^T]] h)` and is doubled up to
/// `T` through `S(2h) = e^{Ah} S(h) e^{A^T h} + S(h)`, which stays finite for stiff `A`.
pub fn linear_terminal_law(spec: &LinearSpec, x0: &[f64], horizon: f64) -> GaussianLaw {
    let a = spec.drift.as_ref();
    let d = a.nrows();
    let q = &spec.diffusion * spec.diffusion.transpose();
    let norm = (0..d).map(|j| (0..d).map(|i| a[(i, j)].abs()).sum::<f64>()).fold(0.0, f64::max);
    let doublings = if norm * horizon > 1.0 { (norm * horizon).log2().ceil() as i32 } else { 0 };
    let h = horizon / 2f64.powi(doublings);
    let block = Mat::from_fn(2 * d, 2 * d, |i, j| match (i < d, j < d) {
        (true, true) => -a[(i, j)],
        (true, false) => q[(i, j - d)],
        (false, true) => 0.0,
        (false, false) => a[(j - d, i - d)],
    });
    let e = expm(block.as_ref(), h);
    let mut cov = e.get(d.., d..).transpose() * e.get(..d, d..);
    let mut prop = expm(a, h);
    for _ in 0..doublings {
        cov = &prop * &cov * prop.transpose() + &cov;
        prop = &prop * &prop;
    }
    let cov = Mat::from_fn(d, d, |i, j| 0.5 * (cov[(i, j)] + cov[(j, i)]));
    let mean = (0..d).map(|i| (0..d).map(|j| prop[(i, j)] * x0[j]).sum()).collect();
    GaussianLaw { mean, cov }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleValue {
    pub rho: f64,
    /// Zero for quadrature results.
    pub std_error: f64,
    pub method: &'static str,
}

/// `P(||X|| > L)` for a centred 2-D Gaussian:
/// `(1 / (2 pi sqrt(det S))) int_0^{2 pi} exp(-L^2 q / 2) / q dtheta`, `q = u^T S^{-1} u`.
/// The integrand is smooth and periodic, so the trapezoid rule converges geometrically.
pub fn polar_norm_tail_2d(cov: MatRef<'_, f64>, level: f64) -> f64 {
    let (a, b, c) = (cov[(0, 0)], 0.5 * (cov[(0, 1)] + cov[(1, 0)]), cov[(1, 1)]);
    let det = a * c - b * b;
    let (ia, ib, ic) = (c / det, -b / det, a / det);
    let n = 4096;
    let mut sum = KahanSum::default();
    for k in 0..n {
        let th = 2.0 * PI * k as f64 / n as f64;
        let (s, co) = th.sin_cos();
        let q = ia * co * co + 2.0 * ib * co * s + ic * s * s;
        sum.add((-0.5 * level * level * q).exp() / q);
    }
    sum.value() * (2.0 * PI / n as f64) / (2.0 * PI * det.sqrt())
}

/// `P(sum_i s_i Z_i^2 > L^2)` for variances `s_i` by exponentially tilted sampling at the
/// saddle point, with its standard error.
pub fn norm_tail_tilted(variances: &[f64], level: f64, samples: usize, seed: u64) -> OracleValue {
    let l2 = level * level;
    let smax = variances.iter().cloned().fold(0.0, f64::max);
    let kprime = |th: f64| variances.iter().map(|s| s / (1.0 - 2.0 * th * s)).sum::<f64>();
    let theta = if kprime(0.0) >= l2 {
        0.0
    } else {
        let (mut lo, mut hi) = (0.0, 0.5 / smax);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if kprime(mid) < l2 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let log_mgf: f64 = -0.5 * variances.iter().map(|s| (1.0 - 2.0 * theta * s).ln()).sum::<f64>();
    let stds: Vec<f64> = variances.iter().map(|s| (1.0 / (1.0 - 2.0 * theta * s)).sqrt()).collect();
    let chunk = 10_000usize;
    let chunks = samples.div_ceil(chunk);
    let partial: Vec<(f64, f64)> = (0..chunks as u64)
        .into_par_iter()
        .map(|ci| {
            let mut rng = derive_path_rng(seed, ci);
            let (mut s1, mut s2) = (KahanSum::default(), KahanSum::default());
            let count = chunk.min(samples - ci as usize * chunk);
            for _ in 0..count {
                let mut q = 0.0;
                for (v, sd) in variances.iter().zip(&stds) {
                    let z = sd * rng.normal();
                    q += v * z * z;
                }
                let w = if q > l2 { (log_mgf - theta * q).exp() } else { 0.0 };
                s1.add(w);
                s2.add(w * w);
            }
            (s1.value(), s2.value())
        })
        .collect();
    let (mut s1, mut s2) = (KahanSum::default(), KahanSum::default());
    for (a, b) in partial {
        s1.add(a);
        s2.add(b);
    }
    let n = samples as f64;
    let mean = s1.value() / n;
    let var = (s2.value() / n - mean * mean).max(0.0) * n / (n - 1.0);
    OracleValue { rho: mean, std_error: (var / n).sqrt(), method: "tilted Gaussian sampling" }
}

/// Event probability under a Gaussian law.
pub fn gaussian_event_probability(law: &GaussianLaw, margin: &Margin, mc_samples: usize, seed: u64) -> Result<OracleValue> {
    let d = law.mean.len();
    margin.check_dim(d)?;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    match *margin {
        Margin::HalfSpace { coord, threshold } => {
            let s = law.cov[(coord, coord)].sqrt();
            Ok(OracleValue { rho: std_normal.sf((threshold - law.mean[coord]) / s), std_error: 0.0, method: "normal tail" })
        }
        Margin::AbsCoord { coord, level } => {
            let (m, s) = (law.mean[coord], law.cov[(coord, coord)].sqrt());
            let rho = std_normal.cdf((-level - m) / s) + std_normal.sf((level - m) / s);
            Ok(OracleValue { rho, std_error: 0.0, method: "normal tails" })
        }
        Margin::NormExterior { level } => {
            if law.mean.iter().any(|m| m.abs() > 1e-14) {
                return Err(Error::Unsupported("norm-event oracle needs a centred terminal law".into()));
            }
            if d == 1 {
                let s = law.cov[(0, 0)].sqrt();
                return Ok(OracleValue { rho: 2.0 * std_normal.sf(level / s), std_error: 0.0, method: "normal tails" });
            }
            if d == 2 {
                return Ok(OracleValue { rho: polar_norm_tail_2d(law.cov.as_ref(), level), std_error: 0.0, method: "polar quadrature" });
            }
            let evd = law.cov.self_adjoint_eigen(Side::Lower).map_err(|e| Error::Numerical(format!("covariance eigen: {e:?}")))?;
            let vars: Vec<f64> = evd.S().column_vector().iter().map(|v| v.max(0.0)).collect();
            Ok(norm_tail_tilted(&vars, level, mc_samples, seed))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Oracle {
    pub value: OracleValue,
    pub law: GaussianLaw,
}

/// Reference probability of the terminal event for a linear model started at `x0`.
pub fn analytic_oracles(model: &SdeModel, margin: &Margin, x0: &[f64], horizon: f64) -> Result<Oracle> {
    let spec = model
        .linear_spec()
        .ok_or_else(|| Error::Unsupported(format!("model `{}` has no linear form; no analytic oracle", model.name())))?;
    if x0.len() != model.dim_state() {
        return Err(Error::Shape(format!("x0 of length {} for d = {}", x0.len(), model.dim_state())));
    }
    let law = linear_terminal_law(spec, x0, horizon);
    let value = gaussian_event_probability(&law, margin, 1_000_000, 0x5eed)?;
    Ok(Oracle { value, law })
}

/// The exact Doob control `u = sigma d/dx log Phi` for a 1-D linear model with a mollified
/// half-space observable, `Phi(t, x) = E[f(X_T) | X_t = x]` by Gauss-Hermite quadrature
/// over the Gaussian transition kernel.
#[derive(Clone, Debug)]
pub struct ExactOuDoob {
    theta: f64,
    sigma: f64,
    threshold: f64,
    sharpness: f64,
    horizon: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl ExactOuDoob {
    pub fn new(model: &SdeModel, obs: &EventObservable, horizon: f64, quadrature_nodes: usize) -> Result<Self> {
        let spec = model.linear_spec().filter(|_| model.dim_state() == 1 && model.dim_noise() == 1);
        let spec = spec.ok_or_else(|| Error::Unsupported("exact Doob control needs a 1-D linear model".into()))?;
        let theta = -spec.drift[(0, 0)];
        if theta <= 0.0 {
            return Err(Error::Unsupported("exact Doob control needs a mean-reverting drift".into()));
        }
        let threshold = match (obs.margin.clone(), obs.mode) {
            (Margin::HalfSpace { coord: 0, threshold }, ObsMode::Mollified) => threshold,
            _ => return Err(Error::Unsupported("exact Doob control needs a mollified half-space observable".into())),
        };
        let (nodes, weights) = gauss_hermite_normal(quadrature_nodes)?;
        Ok(ExactOuDoob { theta, sigma: spec.diffusion[(0, 0)], threshold, sharpness: obs.sharpness, horizon, nodes, weights })
    }

    /// `f`, `f'`, `f''` of the logistic form of the mollifier (stable far in the tail).
    #[inline]
    fn f_jet(&self, x: f64) -> (f64, f64, f64) {
        let y = 2.0 * self.sharpness * (x - self.threshold);
        let f = if y >= 0.0 { 1.0 / (1.0 + (-y).exp()) } else { let e = y.exp(); e / (1.0 + e) };
        let g = 1.0 - f;
        let f1 = 2.0 * self.sharpness * f * g;
        let f2 = 2.0 * self.sharpness * f1 * (g - f);
        (f, f1, f2)
    }

    /// `(Phi, Phi_x, Phi_xx)` at `(t, x)`.
    pub fn phi(&self, t: f64, x: f64) -> (f64, f64, f64) {
        let tau = (self.horizon - t).max(0.0);
        let decay = (-self.theta * tau).exp();
        let s = (self.sigma * self.sigma / (2.0 * self.theta) * (1.0 - decay * decay)).sqrt();
        let m = x * decay;
        let (mut p, mut p1, mut p2) = (0.0, 0.0, 0.0);
        for (z, w) in self.nodes.iter().zip(&self.weights) {
            let (f, f1, f2) = self.f_jet(m + s * z);
            p += w * f;
            p1 += w * f1;
            p2 += w * f2;
        }
        (p, decay * p1, decay * decay * p2)
    }

    pub fn rho(&self, x0: f64) -> f64 {
        self.phi(0.0, x0).0
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }
}

impl Control for ExactOuDoob {
    type Workspace = ();

    fn noise_dim(&self) -> usize {
        1
    }

    fn workspace(&self) {}

    fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if (grid.horizon - self.horizon).abs() > 1e-12 * self.horizon {
            return Err(Error::Config(format!("exact control horizon {} differs from ensemble horizon {}", self.horizon, grid.horizon)));
        }
        Ok(())
    }

    fn bias(&self, _ws: &mut (), _step: usize, t: f64, x: &[f64], u: &mut [f64]) {
        let (p, p1, _) = self.phi(t, x[0]);
        u[0] = self.sigma * p1 / p;
    }

    fn supports_jacobian(&self) -> bool {
        true
    }

    fn bias_jacobian(&self, _ws: &mut (), _step: usize, t: f64, x: &[f64], u: &mut [f64], jac: &mut [f64]) {
        let (p, p1, p2) = self.phi(t, x[0]);
        u[0] = self.sigma * p1 / p;
        jac[0] = self.sigma * (p2 / p - (p1 / p) * (p1 / p));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_builtin_model;
    use std::collections::BTreeMap;

    fn model(name: &str) -> SdeModel {
        make_builtin_model(name, &BTreeMap::new()).unwrap()
    }

    #[test]
    fn ou_terminal_law() {
        let law = linear_terminal_law(model("ou1d").linear_spec().unwrap(), &[0.5], 1.0);
        assert!((law.cov[(0, 0)] - (1.0 - (-2f64).exp())).abs() < 1e-13, "{:?}", law);
        assert!((law.mean[0] - 0.5 * (-1f64).exp()).abs() < 1e-14);
    }

    /// Lyapunov ODE by RK4 as an independent check of the block exponential.
    fn lyapunov_rk4(a: &[[f64; 2]; 2], q: &[[f64; 2]; 2], t: f64, n: usize) -> [[f64; 2]; 2] {
        let rhs = |s: &[[f64; 2]; 2]| {
            let mut out = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    out[i][j] = q[i][j] + (0..2).map(|k| a[i][k] * s[k][j] + s[i][k] * a[j][k]).sum::<f64>();
                }
            }
            out
        };
        let add = |s: &[[f64; 2]; 2], k: &[[f64; 2]; 2], h: f64| {
            let mut o = *s;
            for i in 0..2 {
                for j in 0..2 {
                    o[i][j] += h * k[i][j];
                }
            }
            o
        };
        let h = t / n as f64;
        let mut s = [[0.0; 2]; 2];
        for _ in 0..n {
            let k1 = rhs(&s);
            let k2 = rhs(&add(&s, &k1, h / 2.0));
            let k3 = rhs(&add(&s, &k2, h / 2.0));
            let k4 = rhs(&add(&s, &k3, h));
            for i in 0..2 {
                for j in 0..2 {
                    s[i][j] += h / 6.0 * (k1[i][j] + 2.0 * k2[i][j] + 2.0 * k3[i][j] + k4[i][j]);
                }
            }
        }
        s
    }

    #[test]
    fn van_loan_matches_lyapunov_ode() {
        for name in ["nonnormal2d", "brownian_osc"] {
            let m = model(name);
            let spec = m.linear_spec().unwrap();
            let law = linear_terminal_law(spec, &[0.0, 0.0], 10.0);
            let a = [[spec.drift[(0, 0)], spec.drift[(0, 1)]], [spec.drift[(1, 0)], spec.drift[(1, 1)]]];
            let bbt = &spec.diffusion * spec.diffusion.transpose();
            let q = [[bbt[(0, 0)], bbt[(0, 1)]], [bbt[(1, 0)], bbt[(1, 1)]]];
            let s = lyapunov_rk4(&a, &q, 10.0, 20_000);
            for i in 0..2 {
                for j in 0..2 {
                    assert!((law.cov[(i, j)] - s[i][j]).abs() < 1e-10, "{name} {i}{j}");
                }
            }
        }
    }

    #[test]
    fn ou_reference_probability() {
        let o = analytic_oracles(&model("ou1d"), &Margin::HalfSpace { coord: 0, threshold: 2.0 }, &[0.0], 1.0).unwrap();
        assert!((o.value.rho - 1.5745e-2).abs() < 5e-7, "{}", o.value.rho);
    }

    #[test]
    fn polar_quadrature_isotropic() {
        // ||X||^2 / s is chi-square with 2 degrees of freedom
        let s = 0.3;
        let cov = Mat::from_fn(2, 2, |i, j| if i == j { s } else { 0.0 });
        let l: f64 = 1.7;
        assert!((polar_norm_tail_2d(cov.as_ref(), l) - (-l * l / (2.0 * s)).exp()).abs() < 1e-15);
    }

    #[test]
    fn tilted_sampling_agrees_with_quadrature() {
        let cov = Mat::from_fn(2, 2, |i, j| [[0.02, 0.011], [0.011, 0.05]][i][j]);
        let exact = polar_norm_tail_2d(cov.as_ref(), 1.5);
        let evd = cov.self_adjoint_eigen(Side::Lower).unwrap();
        let vars: Vec<f64> = evd.S().column_vector().iter().cloned().collect();
        let mc = norm_tail_tilted(&vars, 1.5, 200_000, 3);
        assert!(exact < 1e-6);
        assert!((mc.rho - exact).abs() < 4.0 * mc.std_error, "{} vs {exact} ({})", mc.rho, mc.std_error);
        assert!(mc.std_error < 0.03 * exact, "{mc:?} {exact}");
    }

    #[test]
    fn nonlinear_models_have_no_oracle() {
        let r = analytic_oracles(&model("vdp"), &Margin::NormExterior { level: 2.7 }, &[2.0, 0.0], 10.0);
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }

    #[test]
    fn exact_control_derivatives() {
        let obs = EventObservable::mollified(Margin::HalfSpace { coord: 0, threshold: 2.0 }, 3.0);
        let c = ExactOuDoob::new(&model("ou1d"), &obs, 1.0, 160).unwrap();
        let h = 1e-4;
        for (t, x) in [(0.0, 0.0), (0.5, 1.0), (0.9, -0.5), (0.99, 2.2)] {
            let (p, p1, p2) = c.phi(t, x);
            let (pp, pp1, _) = c.phi(t, x + h);
            let (pm, pm1, _) = c.phi(t, x - h);
            assert!(((pp - pm) / (2.0 * h) - p1).abs() < 1e-6 * p1.abs().max(p), "{t} {x}");
            assert!(((pp1 - pm1) / (2.0 * h) - p2).abs() < 1e-6 * p2.abs().max(p1.abs()), "{t} {x}");
        }
        // mollified reference value: E f(N(0, 1 - e^-2))
        assert!((c.rho(0.0) - 0.020452).abs() < 2e-6, "{}", c.rho(0.0));
    }
}
