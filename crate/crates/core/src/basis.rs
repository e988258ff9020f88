//! Total-degree polynomial dictionaries with analytic value/gradient/Hessian jets.
//!
//! Elements are tensor products `prod_k P_{a_k}(x_k)` over multi-indices `a` with
//! `|a| <= p`, in graded lexicographic order: by total degree, then by descending
//! exponent of the first coordinate, then the second, and so on. The first element
//! is always the constant 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Jet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFamily {
    /// Probabilists' Hermite polynomials `He_n`.
    Hermite,
    /// Legendre polynomials orthonormal under the uniform probability measure on a box.
    LegendreBox,
    /// Plain monomials `x^n`.
    LinearExact,
}

/// Serialized form of a [`BasisSet`]; the multi-indices are rebuilt on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub family: BasisFamily,
    pub dim: usize,
    pub degree: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "BasisSpec", try_from = "BasisSpec")]
pub struct BasisSet {
    family: BasisFamily,
    dim: usize,
    degree: u32,
    bounds: Option<Vec<[f64; 2]>>,
    multi_indices: Vec<Vec<u32>>,
}

impl From<BasisSet> for BasisSpec {
    fn from(b: BasisSet) -> Self {
        BasisSpec { family: b.family, dim: b.dim, degree: b.degree, bounds: b.bounds }
    }
}

impl TryFrom<BasisSpec> for BasisSet {
    type Error = Error;
    fn try_from(s: BasisSpec) -> Result<Self> {
        build_basis(s.family, s.dim, s.degree, s.bounds.as_deref())
    }
}

pub fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

fn graded_lex(dim: usize, degree: u32) -> Vec<Vec<u32>> {
    fn fill(prefix: &mut Vec<u32>, dim: usize, remaining: u32, out: &mut Vec<Vec<u32>>) {
        if prefix.len() + 1 == dim {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for a in (0..=remaining).rev() {
            prefix.push(a);
            fill(prefix, dim, remaining - a, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for total in 0..=degree {
        fill(&mut Vec::with_capacity(dim), dim, total, &mut out);
    }
    out
}

pub fn build_basis(family: BasisFamily, dim: usize, degree: u32, bounds: Option<&[[f64; 2]]>) -> Result<BasisSet> {
    if dim == 0 {
        return Err(Error::Config("basis dimension must be positive".into()));
    }
    let bounds = match (family, bounds) {
        (BasisFamily::LegendreBox, None) => return Err(Error::Config("legendre_box basis needs a box".into())),
        (BasisFamily::LegendreBox, Some(b)) => {
            if b.len() != dim {
                return Err(Error::Config(format!("basis box has {} intervals for d = {dim}", b.len())));
            }
            if b.iter().any(|[lo, hi]| !(lo.is_finite() && hi.is_finite() && lo < hi)) {
                return Err(Error::Config(format!("degenerate basis box {b:?}")));
            }
            Some(b.to_vec())
        }
        (_, Some(_)) => return Err(Error::Config(format!("{family:?} basis takes no box"))),
        (_, None) => None,
    };
    Ok(BasisSet { family, dim, degree, bounds, multi_indices: graded_lex(dim, degree) })
}

/// `(He_n(x), He_n'(x), He_n''(x))`.
pub fn hermite_jet(n_order: u32, x: f64) -> (f64, f64, f64) {
    let mut t = OneDim::new(n_order as usize);
    t.fill(BasisFamily::Hermite, x, 1.0, 0.0);
    let n = n_order as usize;
    (t.v[n], t.d1[n], t.d2[n])
}

/// One-dimensional value/derivative tables up to a degree.
#[derive(Clone, Debug)]
struct OneDim {
    v: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
}

impl OneDim {
    fn new(p: usize) -> Self {
        OneDim { v: vec![0.0; p + 1], d1: vec![0.0; p + 1], d2: vec![0.0; p + 1] }
    }

    /// Tables for the family at `x`; Legendre uses `y = scale * x + shift` on [-1, 1].
    fn fill(&mut self, family: BasisFamily, x: f64, scale: f64, shift: f64) {
        let p = self.v.len() - 1;
        let (v, d1, d2) = (&mut self.v, &mut self.d1, &mut self.d2);
        v[0] = 1.0;
        d1[0] = 0.0;
        d2[0] = 0.0;
        match family {
            BasisFamily::Hermite => {
                for n in 1..=p {
                    let nf = n as f64;
                    v[n] = x * v[n - 1] - if n >= 2 { (nf - 1.0) * v[n - 2] } else { 0.0 };
                    d1[n] = nf * v[n - 1];
                    d2[n] = if n >= 2 { nf * (nf - 1.0) * v[n - 2] } else { 0.0 };
                }
            }
            BasisFamily::LinearExact => {
                for n in 1..=p {
                    let nf = n as f64;
                    v[n] = x * v[n - 1];
                    d1[n] = nf * v[n - 1];
                    d2[n] = if n >= 2 { nf * (nf - 1.0) * v[n - 2] } else { 0.0 };
                }
            }
            BasisFamily::LegendreBox => {
                let y = scale * x + shift;
                if p >= 1 {
                    v[1] = y;
                    d1[1] = 1.0;
                    d2[1] = 0.0;
                }
                for n in 1..p {
                    let nf = n as f64;
                    v[n + 1] = ((2.0 * nf + 1.0) * y * v[n] - nf * v[n - 1]) / (nf + 1.0);
                    d1[n + 1] = d1[n - 1] + (2.0 * nf + 1.0) * v[n];
                    d2[n + 1] = d2[n - 1] + (2.0 * nf + 1.0) * d1[n];
                }
                for n in 0..=p {
                    let norm = (2.0 * n as f64 + 1.0).sqrt();
                    v[n] *= norm;
                    d1[n] *= norm * scale;
                    d2[n] *= norm * scale * scale;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum JetOrder {
    Value,
    Gradient,
    Hessian,
}

/// Jets of every basis element at one point, plus the scratch tables used to build them.
#[derive(Clone, Debug)]
pub struct BasisEval {
    n: usize,
    d: usize,
    tables: Vec<OneDim>,
    pub values: Vec<f64>,
    /// Row-major `n x d`.
    pub grads: Vec<f64>,
    /// Row-major `n x d x d`.
    pub hess: Vec<f64>,
}

impl BasisEval {
    #[inline]
    pub fn grad(&self, k: usize) -> &[f64] {
        &self.grads[k * self.d..(k + 1) * self.d]
    }

    #[inline]
    pub fn hessian(&self, k: usize) -> &[f64] {
        &self.hess[k * self.d * self.d..(k + 1) * self.d * self.d]
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

impl BasisSet {
    pub fn family(&self) -> BasisFamily {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.multi_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.multi_indices.is_empty()
    }

    pub fn bounds(&self) -> Option<&[[f64; 2]]> {
        self.bounds.as_deref()
    }

    pub fn multi_indices(&self) -> &[Vec<u32>] {
        &self.multi_indices
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match &self.bounds {
            None => true,
            Some(b) => x.iter().zip(b).all(|(v, [lo, hi])| *lo <= *v && *v <= *hi),
        }
    }

    pub fn evaluator(&self) -> BasisEval {
        let (n, d) = (self.len(), self.dim);
        BasisEval {
            n,
            d,
            tables: vec![OneDim::new(self.degree as usize); d],
            values: vec![0.0; n],
            grads: vec![0.0; n * d],
            hess: vec![0.0; n * d * d],
        }
    }

    /// Fills `out` with the jets of all elements at `x` up to `order`.
    pub fn eval_into(&self, x: &[f64], order: JetOrder, out: &mut BasisEval) {
        let d = self.dim;
        for (k, table) in out.tables.iter_mut().enumerate() {
            let (scale, shift) = match &self.bounds {
                Some(b) => {
                    let [lo, hi] = b[k];
                    (2.0 / (hi - lo), -(hi + lo) / (hi - lo))
                }
                None => (1.0, 0.0),
            };
            table.fill(self.family, x[k], scale, shift);
        }
        let t = &out.tables;
        for (e, alpha) in self.multi_indices.iter().enumerate() {
            let mut value = 1.0;
            for k in 0..d {
                value *= t[k].v[alpha[k] as usize];
            }
            out.values[e] = value;
            if order == JetOrder::Value {
                continue;
            }
            for j in 0..d {
                let mut g = t[j].d1[alpha[j] as usize];
                for k in (0..d).filter(|&k| k != j) {
                    g *= t[k].v[alpha[k] as usize];
                }
                out.grads[e * d + j] = g;
            }
            if order == JetOrder::Hessian {
                for j in 0..d {
                    for l in j..d {
                        let mut h = if j == l {
                            t[j].d2[alpha[j] as usize]
                        } else {
                            t[j].d1[alpha[j] as usize] * t[l].d1[alpha[l] as usize]
                        };
                        for k in (0..d).filter(|&k| k != j && k != l) {
                            h *= t[k].v[alpha[k] as usize];
                        }
                        out.hess[e * d * d + j * d + l] = h;
                        out.hess[e * d * d + l * d + j] = h;
                    }
                }
            }
        }
    }
}

/// Exact jet of element `k` at `x`.
pub fn basis_jet(basis: &BasisSet, k: usize, x: &[f64]) -> Result<Jet> {
    if k >= basis.len() {
        return Err(Error::IndexOutOfRange { index: k, size: basis.len() });
    }
    if x.len() != basis.dim() {
        return Err(Error::Shape(format!("basis of dimension {} evaluated at a point of length {}", basis.dim(), x.len())));
    }
    let mut ev = basis.evaluator();
    basis.eval_into(x, JetOrder::Hessian, &mut ev);
    Ok(Jet { value: ev.values[k], grad: ev.grad(k).to_vec(), hess: ev.hessian(k).to_vec() })
}
