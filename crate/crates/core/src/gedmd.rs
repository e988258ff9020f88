//! Generator EDMD: test points, matrix assembly, `K = dPsi Psi^+`, eigenpairs and holdout validation.

use std::io::Write;
use std::path::Path;

use faer::{c64, Mat, MatRef};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSet, JetOrder};
use crate::error::{Error, Result};
use crate::linalg::{lstsq, PINV_RTOL};
use crate::model::{EventObservable, Margin, PointGenerator, SdeModel};
use crate::paths::{derive_path_rng, simulate_uncontrolled, PathSetup, Scheme, TimeGrid, WeightRule};

pub const DEFAULT_MSE_THRESHOLD: f64 = 0.04;

/// Tensor grid of initial conditions; each axis is `count` evenly spaced values
/// including both ends (a single value sits at the midpoint).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcGrid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub counts: Vec<usize>,
}

impl IcGrid {
    pub fn points(&self) -> Result<Vec<Vec<f64>>> {
        let d = self.lower.len();
        if self.upper.len() != d || self.counts.len() != d || d == 0 {
            return Err(Error::Config("initial-condition grid needs lower, upper and counts of equal length".into()));
        }
        if self.counts.contains(&0) {
            return Err(Error::Config("initial-condition grid counts must be positive".into()));
        }
        let axis = |k: usize, i: usize| {
            let n = self.counts[k];
            if n == 1 {
                0.5 * (self.lower[k] + self.upper[k])
            } else {
                self.lower[k] + (self.upper[k] - self.lower[k]) * i as f64 / (n - 1) as f64
            }
        };
        let total: usize = self.counts.iter().product();
        let mut out = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut p = vec![0.0; d];
            for k in (0..d).rev() {
                p[k] = axis(k, rem % self.counts[k]);
                rem /= self.counts[k];
            }
            out.push(p);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub description: String,
    pub t_traj: f64,
    pub stride: f64,
    pub seed: u64,
    /// Points discarded for lying outside the basis box (training, holdout).
    pub dropped_outside_box: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct TestPointSet {
    pub points: Vec<Vec<f64>>,
    pub holdout: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

impl TestPointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Drops points outside `bounds` from both sets, counting them in the provenance.
    pub fn retain_in_box(mut self, bounds: &[[f64; 2]]) -> Result<TestPointSet> {
        let inside = |p: &Vec<f64>| p.iter().zip(bounds).all(|(v, [lo, hi])| *lo <= *v && *v <= *hi);
        let (m0, h0) = (self.points.len(), self.holdout.len());
        self.points.retain(inside);
        self.holdout.retain(inside);
        self.provenance.dropped_outside_box = (m0 - self.points.len(), h0 - self.holdout.len());
        if self.points.is_empty() || self.holdout.is_empty() {
            return Err(Error::Config("no test points left inside the basis box".into()));
        }
        Ok(self)
    }
}

/// Trajectory sampling settings for [`generate_test_points`].
#[derive(Clone, Copy, Debug)]
pub struct TrajectorySampling {
    pub t_traj: f64,
    pub stride: f64,
    /// Largest integrator step; each stride is split into equal substeps no larger than this.
    pub max_dt: f64,
    pub scheme: Scheme,
}

fn sample_trajectories(model: &SdeModel, ics: &[Vec<f64>], s: &TrajectorySampling, seed: u64) -> Result<Vec<Vec<f64>>> {
    let samples = TimeGrid::new(s.t_traj, s.stride)?;
    let substeps = if samples.steps == 0 { 1 } else { (samples.dt / s.max_dt - 1e-9).ceil().max(1.0) as usize };
    let grid = TimeGrid { horizon: s.t_traj, steps: samples.steps * substeps, dt: samples.dt / substeps as f64 };
    let obs = EventObservable::indicator(Margin::NormExterior { level: f64::INFINITY });
    let per_ic: Vec<Result<Vec<Vec<f64>>>> = ics
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let setup = PathSetup {
                model,
                obs: &obs,
                x0,
                grid,
                scheme: s.scheme,
                weight_rule: WeightRule::Ito,
                record_stride: Some(substeps),
            };
            setup.validate::<crate::paths::NoControl>(None)?;
            let path = simulate_uncontrolled(&setup, &mut derive_path_rng(seed, i as u64), i as u64)?;
            Ok(path.trajectory.unwrap_or_default().into_iter().map(|(_, x)| x).collect())
        })
        .collect();
    let mut out = Vec::new();
    for r in per_ic {
        out.extend(r?);
    }
    Ok(out)
}

/// States along uncontrolled trajectories from every grid node, sampled every `stride`
/// including t = 0. The holdout set repeats the construction with `seed + 1`.
pub fn generate_test_points(model: &SdeModel, grid: &IcGrid, sampling: &TrajectorySampling, seed: u64) -> Result<TestPointSet> {
    let ics = grid.points()?;
    if ics[0].len() != model.dim_state() {
        return Err(Error::Shape(format!("initial conditions of length {} for d = {}", ics[0].len(), model.dim_state())));
    }
    let points = sample_trajectories(model, &ics, sampling, seed)?;
    let holdout = sample_trajectories(model, &ics, sampling, seed.wrapping_add(1))?;
    Ok(TestPointSet {
        points,
        holdout,
        provenance: Provenance {
            description: format!("{:?} grid on {:?}..{:?}", grid.counts, grid.lower, grid.upper),
            t_traj: sampling.t_traj,
            stride: sampling.stride,
            seed,
            dropped_outside_box: (0, 0),
        },
    })
}

/// Independent normal samples with per-coordinate mean and standard deviation
/// (stream 0 of `seed`, holdout from `seed + 1`).
pub fn gaussian_points(mean: &[f64], std: &[f64], count: usize, seed: u64) -> Result<TestPointSet> {
    if mean.len() != std.len() || mean.is_empty() || count == 0 {
        return Err(Error::Config("gaussian points need matching mean/std and a positive count".into()));
    }
    let draw = |seed| {
        let mut rng = derive_path_rng(seed, 0);
        (0..count).map(|_| mean.iter().zip(std).map(|(m, s)| m + s * rng.normal()).collect()).collect()
    };
    Ok(TestPointSet {
        points: draw(seed),
        holdout: draw(seed.wrapping_add(1)),
        provenance: Provenance {
            description: format!("{count} normal samples, mean {mean:?}, std {std:?}"),
            t_traj: 0.0,
            stride: 0.0,
            seed,
            dropped_outside_box: (0, 0),
        },
    })
}

/// `Psi[k, i] = psi_k(x_i)` and `dPsi[k, i] = (A psi_k)(x_i)`.
pub fn assemble_matrices(basis: &BasisSet, model: &SdeModel, points: &[Vec<f64>]) -> Result<(Mat<f64>, Mat<f64>)> {
    let (n, d) = (basis.len(), basis.dim());
    if d != model.dim_state() {
        return Err(Error::Shape(format!("basis dimension {d} vs model dimension {}", model.dim_state())));
    }
    if let Some(bad) = points.iter().find(|p| p.len() != d) {
        return Err(Error::Shape(format!("test point of length {} for d = {d}", bad.len())));
    }
    let cols: Vec<(Vec<f64>, Vec<f64>)> = points
        .par_iter()
        .map_init(
            || basis.evaluator(),
            |ev, x| {
                basis.eval_into(x, JetOrder::Hessian, ev);
                let gen = PointGenerator::new(model, x);
                let dv = (0..n).map(|k| gen.apply(ev.grad(k), ev.hessian(k))).collect();
                (ev.values.clone(), dv)
            },
        )
        .collect();
    let m = points.len();
    let psi = Mat::from_fn(n, m, |k, i| cols[i].0[k]);
    let dpsi = Mat::from_fn(n, m, |k, i| cols[i].1[k]);
    if !psi.is_all_finite() || !dpsi.is_all_finite() {
        return Err(Error::Numerical("basis evaluation overflowed on the test points".into()));
    }
    Ok((psi, dpsi))
}

#[derive(Clone, Debug)]
pub struct KoopmanMatrix {
    pub k: Mat<f64>,
    pub rank: usize,
    pub warning: Option<String>,
}

/// Least-squares generator matrix minimizing `||dPsi - K Psi||_F` over the retained singular subspace.
pub fn koopman_matrix(psi: MatRef<'_, f64>, dpsi: MatRef<'_, f64>) -> Result<KoopmanMatrix> {
    if psi.nrows() != dpsi.nrows() || psi.ncols() != dpsi.ncols() {
        return Err(Error::Shape(format!(
            "Psi is {}x{} but dPsi is {}x{}",
            psi.nrows(),
            psi.ncols(),
            dpsi.nrows(),
            dpsi.ncols()
        )));
    }
    let n = psi.nrows();
    let sol = lstsq(psi.transpose(), dpsi.transpose(), PINV_RTOL)?;
    let warning = (sol.rank < n).then(|| format!("Psi_X has numerical rank {} < n = {n}", sol.rank));
    Ok(KoopmanMatrix { k: sol.x.transpose().to_owned(), rank: sol.rank, warning })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "PairRecord", from = "PairRecord")]
pub struct EigenPair {
    pub lambda: c64,
    pub coeffs: Vec<c64>,
    pub validation_mse: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    lambda: [f64; 2],
    coeffs: Vec<[f64; 2]>,
    #[serde(default)]
    validation_mse: Option<f64>,
}

impl From<EigenPair> for PairRecord {
    fn from(p: EigenPair) -> Self {
        PairRecord {
            lambda: [p.lambda.re, p.lambda.im],
            coeffs: p.coeffs.iter().map(|c| [c.re, c.im]).collect(),
            validation_mse: p.validation_mse,
        }
    }
}

impl From<PairRecord> for EigenPair {
    fn from(r: PairRecord) -> Self {
        EigenPair {
            lambda: c64::new(r.lambda[0], r.lambda[1]),
            coeffs: r.coeffs.iter().map(|c| c64::new(c[0], c[1])).collect(),
            validation_mse: r.validation_mse,
        }
    }
}

impl EigenPair {
    pub fn is_real(&self) -> bool {
        self.lambda.im == 0.0
    }

    /// `phi(x)` from precomputed basis values.
    pub fn eval(&self, psi: &[f64]) -> c64 {
        self.coeffs.iter().zip(psi).fold(c64::new(0.0, 0.0), |acc, (c, p)| acc + c * p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KoopmanSpectrum {
    pub basis: BasisSet,
    pub pairs: Vec<EigenPair>,
    /// Pairs removed by holdout validation, kept for reporting.
    #[serde(default)]
    pub rejected: Vec<EigenPair>,
    pub conjugate_closed: bool,
    #[serde(default)]
    pub rank_warning: Option<String>,
}

fn imag_tol(l: c64) -> f64 {
    1e-12 * l.norm().max(1.0)
}

pub const RESIDUAL_TOL: f64 = 1e-8;

/// Eigenpairs of `K^T`, RMS-normalized over the training points, conjugate-closed,
/// sorted by ascending `|Re lambda|` (a conjugate pair stays adjacent, `Im > 0` first).
pub fn eigenpairs(k: MatRef<'_, f64>, basis: &BasisSet, psi_train: MatRef<'_, f64>) -> Result<KoopmanSpectrum> {
    let n = k.nrows();
    if k.ncols() != n || basis.len() != n || psi_train.nrows() != n {
        return Err(Error::Shape(format!("K is {}x{}, basis has {}, Psi has {} rows", n, k.ncols(), basis.len(), psi_train.nrows())));
    }
    let kt = k.transpose().to_owned();
    if !kt.is_all_finite() {
        return Err(Error::Numerical("generator matrix has non-finite entries".into()));
    }
    let evd = kt.eigen().map_err(|e| Error::Numerical(format!("eigensolver failed on {n}x{n} generator matrix: {e:?}")))?;
    let s = evd.S().column_vector();
    let u = evd.U();
    let m = psi_train.ncols() as f64;
    let mut pairs = Vec::with_capacity(n);
    for j in 0..n {
        let mut lambda = s[j];
        if lambda.im.abs() <= imag_tol(lambda) {
            lambda.im = 0.0;
        } else if lambda.im < 0.0 {
            continue;
        }
        let mut c: Vec<c64> = (0..n).map(|i| u[(i, j)]).collect();
        let big = c.iter().cloned().fold(c64::new(0.0, 0.0), |a, b| if b.norm() > a.norm() { b } else { a });
        if big.norm() == 0.0 {
            return Err(Error::Numerical(format!("zero eigenvector for eigenvalue {lambda}")));
        }
        let phase = big.conj() / big.norm();
        for v in &mut c {
            *v *= phase;
            if lambda.im == 0.0 {
                v.im = 0.0;
            }
        }
        let mut sq = 0.0;
        for i in 0..psi_train.ncols() {
            let phi = c.iter().enumerate().fold(c64::new(0.0, 0.0), |acc, (kk, ck)| acc + ck * psi_train[(kk, i)]);
            sq += phi.norm_sqr();
        }
        let rms = (sq / m).sqrt();
        if !(rms > 0.0 && rms.is_finite()) {
            return Err(Error::Numerical(format!("eigenfunction for {lambda} vanishes on the training points")));
        }
        for v in &mut c {
            *v /= rms;
        }
        let resid: f64 = (0..n)
            .map(|i| {
                let kc = (0..n).fold(c64::new(0.0, 0.0), |acc, l| acc + c[l] * kt[(i, l)]);
                (kc - lambda * c[i]).norm_sqr()
            })
            .sum::<f64>()
            .sqrt();
        let cnorm = c.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        if resid > RESIDUAL_TOL * cnorm {
            return Err(Error::Numerical(format!(
                "eigenpair residual {resid:.3e} exceeds {RESIDUAL_TOL:e} * |c| = {:.3e} for eigenvalue {lambda}",
                RESIDUAL_TOL * cnorm
            )));
        }
        let real = lambda.im == 0.0;
        pairs.push(EigenPair { lambda, coeffs: c.clone(), validation_mse: None });
        if !real {
            pairs.push(EigenPair { lambda: lambda.conj(), coeffs: c.iter().map(|v| v.conj()).collect(), validation_mse: None });
        }
    }
    sort_pairs(&mut pairs);
    Ok(KoopmanSpectrum { basis: basis.clone(), pairs, rejected: Vec::new(), conjugate_closed: true, rank_warning: None })
}

fn sort_pairs(pairs: &mut [EigenPair]) {
    pairs.sort_by(|a, b| {
        let key = |p: &EigenPair| (p.lambda.re.abs(), p.lambda.im.abs(), -p.lambda.im);
        key(a).partial_cmp(&key(b)).unwrap_or(std::cmp::Ordering::Equal)
    });
}

/// `mean |A phi - lambda phi|^2` over points, from assembled holdout matrices.
pub fn validation_mse(pair: &EigenPair, psi: MatRef<'_, f64>, dpsi: MatRef<'_, f64>) -> f64 {
    let (n, m) = (psi.nrows(), psi.ncols());
    let mut total = 0.0;
    for i in 0..m {
        let mut phi = c64::new(0.0, 0.0);
        let mut aphi = c64::new(0.0, 0.0);
        for k in 0..n {
            phi += pair.coeffs[k] * psi[(k, i)];
            aphi += pair.coeffs[k] * dpsi[(k, i)];
        }
        total += (aphi - pair.lambda * phi).norm_sqr();
    }
    total / m as f64
}

/// Keeps pairs whose holdout MSE is at most `threshold`; conjugates share one MSE and
/// are kept or dropped together.
pub fn validate_eigenpairs(spectrum: &KoopmanSpectrum, model: &SdeModel, holdout: &[Vec<f64>], threshold: f64) -> Result<KoopmanSpectrum> {
    if holdout.is_empty() {
        return Err(Error::Config("validation needs a nonempty holdout set".into()));
    }
    let (psi, dpsi) = assemble_matrices(&spectrum.basis, model, holdout)?;
    let mut kept = Vec::new();
    let mut rejected = spectrum.rejected.clone();
    let mut i = 0;
    let mut best = f64::INFINITY;
    while i < spectrum.pairs.len() {
        let p = &spectrum.pairs[i];
        let group = if p.is_real() { 1 } else { 2 };
        let mse = validation_mse(p, psi.as_ref(), dpsi.as_ref());
        best = best.min(mse);
        for q in &spectrum.pairs[i..(i + group).min(spectrum.pairs.len())] {
            let q = EigenPair { validation_mse: Some(mse), ..q.clone() };
            if mse <= threshold {
                kept.push(q);
            } else {
                rejected.push(q);
            }
        }
        i += group;
    }
    if kept.is_empty() {
        return Err(Error::EmptySpectrum { best_mse: best, threshold });
    }
    Ok(KoopmanSpectrum { pairs: kept, rejected, ..spectrum.clone() })
}

impl KoopmanSpectrum {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// First `count` pairs, extended by one when the cut would split a conjugate pair.
    pub fn truncated(&self, count: usize) -> KoopmanSpectrum {
        let mut take = count.min(self.pairs.len());
        if take > 0 && take < self.pairs.len() {
            let last = &self.pairs[take - 1];
            if last.lambda.im > 0.0 {
                take += 1;
            }
        }
        KoopmanSpectrum { pairs: self.pairs[..take].to_vec(), ..self.clone() }
    }

    /// Writes a long-format CSV: one row per (pair, basis element).
    pub fn write_report(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["pair", "status", "lambda_re", "lambda_im", "validation_mse", "basis_index", "multi_index", "coef_re", "coef_im"])?;
        let rows = self.pairs.iter().map(|p| ("retained", p)).chain(self.rejected.iter().map(|p| ("rejected", p)));
        for (idx, (status, p)) in rows.enumerate() {
            for (k, c) in p.coeffs.iter().enumerate() {
                let mi = self.basis.multi_indices()[k].iter().map(|a| a.to_string()).collect::<Vec<_>>().join(" ");
                w.write_record([
                    idx.to_string(),
                    status.to_string(),
                    format!("{:e}", p.lambda.re),
                    format!("{:e}", p.lambda.im),
                    p.validation_mse.map(|v| format!("{v:e}")).unwrap_or_default(),
                    k.to_string(),
                    mi,
                    format!("{:e}", c.re),
                    format!("{:e}", c.im),
                ])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        std::fs::File::create(path)?.write_all(&bytes)?;
        Ok(())
    }
}

/// Assemble, solve, eigendecompose and validate in one go.
pub fn fit_spectrum(model: &SdeModel, basis: &BasisSet, points: &TestPointSet, threshold: f64) -> Result<KoopmanSpectrum> {
    let (psi, dpsi) = assemble_matrices(basis, model, &points.points)?;
    let km = koopman_matrix(psi.as_ref(), dpsi.as_ref())?;
    let mut spectrum = eigenpairs(km.k.as_ref(), basis, psi.as_ref())?;
    spectrum.rank_warning = km.warning;
    validate_eigenpairs(&spectrum, model, &points.holdout, threshold)
}
