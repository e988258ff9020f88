//! Dense helpers over `faer`: truncated-SVD least squares, Gauss-Hermite rules, small matrix algebra.

use faer::{Mat, MatRef, Side};

use crate::error::{Error, Result};

/// Relative singular-value cutoff for pseudoinverses.
pub const PINV_RTOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct LstsqSolution {
    pub x: Mat<f64>,
    pub rank: usize,
    pub full_rank: usize,
    pub sigma_max: f64,
}

impl LstsqSolution {
    pub fn rank_deficient(&self) -> bool {
        self.rank < self.full_rank
    }
}

/// Minimum-norm least-squares solution of `a x = b` via the SVD of `a`, discarding
/// singular values below `rtol * sigma_max`.
pub fn lstsq(a: MatRef<'_, f64>, b: MatRef<'_, f64>, rtol: f64) -> Result<LstsqSolution> {
    if a.nrows() != b.nrows() {
        return Err(Error::Shape(format!("lstsq with {} equations but {} right-hand rows", a.nrows(), b.nrows())));
    }
    let (m, n) = (a.nrows(), a.ncols());
    if m == 0 || n == 0 {
        return Err(Error::Shape(format!("lstsq on an empty {m}x{n} system")));
    }
    if !a.is_all_finite() || !b.is_all_finite() {
        return Err(Error::Numerical("non-finite entries in least-squares system".into()));
    }
    let svd = a.thin_svd().map_err(|e| Error::Numerical(format!("SVD did not converge: {e:?}")))?;
    let (u, s, v) = (svd.U(), svd.S().column_vector(), svd.V());
    let sigma_max = s.iter().cloned().fold(0.0f64, f64::max);
    let cut = rtol * sigma_max;
    let rank = s.iter().filter(|&&x| x > cut).count();
    // x = V_r S_r^{-1} U_r^T b
    let utb = u.get(.., ..rank).transpose() * b;
    let scaled = Mat::from_fn(rank, b.ncols(), |i, j| utb[(i, j)] / s[i]);
    let x = v.get(.., ..rank) * &scaled;
    Ok(LstsqSolution { x, rank, full_rank: m.min(n), sigma_max })
}

/// Nodes and weights of the `n`-point Gauss-Hermite rule for the standard normal law
/// (weights sum to 1), by the Golub-Welsch eigenvalue method.
pub fn gauss_hermite_normal(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let jacobi = Mat::from_fn(n, n, |i, j| if i.abs_diff(j) == 1 { (i.max(j) as f64).sqrt() } else { 0.0 });
    let evd = jacobi.self_adjoint_eigen(Side::Lower).map_err(|e| Error::Numerical(format!("Golub-Welsch: {e:?}")))?;
    let nodes: Vec<f64> = evd.S().column_vector().iter().cloned().collect();
    let u = evd.U();
    let mut weights: Vec<f64> = (0..n).map(|k| u[(0, k)] * u[(0, k)]).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok((nodes, weights))
}

/// Neumaier-compensated sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut s = KahanSum::default();
    for x in it {
        s.add(x);
    }
    s.value()
}

/// `exp(a t)` by scaling and squaring of a degree-16 Taylor polynomial.
pub fn expm(a: MatRef<'_, f64>, t: f64) -> Mat<f64> {
    let n = a.nrows();
    let norm = (0..n).map(|i| (0..n).map(|j| (a[(i, j)] * t).abs()).sum::<f64>()).fold(0.0, f64::max);
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let scale = t / 2f64.powi(squarings as i32);
    let x = Mat::from_fn(n, n, |i, j| a[(i, j)] * scale);
    let mut result = Mat::<f64>::identity(n, n);
    let mut term = Mat::<f64>::identity(n, n);
    for k in 1..=16 {
        term = &term * &x * faer::Scale(1.0 / k as f64);
        result += &term;
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}
