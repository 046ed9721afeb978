//! Dense kernels and the scalar/vector formulas shared by every module.
//!
//! Vectors are plain `f64` slices; matrices are row-major [`Mat`]. Functions
//! that take untrusted input check finiteness and dimensions and return
//! [`Error::InvalidInput`] rather than producing NaN.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability floor used by KL divergence and cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// Norms below this make cosine similarity degenerate.
pub const NORM_EPS: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("matrix dimensions must be positive"));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if !all_finite(&data) {
            return Err(Error::invalid("matrix entries must be finite"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { rows, cols, data }
    }

    /// A `rows x cols` matrix with orthonormal columns (requires `rows >= cols`),
    /// obtained by Gram-Schmidt on Gaussian columns.
    pub fn random_orthonormal_columns<R: Rng + ?Sized>(
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if cols == 0 || rows < cols {
            return Err(Error::invalid(format!(
                "cannot build {cols} orthonormal columns in dimension {rows}"
            )));
        }
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
        while basis.len() < cols {
            let mut v: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
            // two passes of modified Gram-Schmidt
            for _ in 0..2 {
                for b in &basis {
                    let proj = dot(&v, b);
                    axpy(-proj, b, &mut v);
                }
            }
            let n = norm(&v);
            if n > 1e-8 {
                v.iter_mut().for_each(|x| *x /= n);
                basis.push(v);
            }
        }
        let mut m = Mat::zeros(rows, cols);
        for (j, b) in basis.iter().enumerate() {
            for (i, &x) in b.iter().enumerate() {
                m[(i, j)] = x;
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.data
            .chunks_exact(self.cols)
            .map(|row| dot(row, x))
            .collect()
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, &yi) in self.data.chunks_exact(self.cols).zip(y) {
            axpy(yi, row, &mut out);
        }
        out
    }

    /// `self += alpha · u vᵀ`
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (row, &ui) in self.data.chunks_exact_mut(self.cols).zip(u) {
            axpy(alpha * ui, v, row);
        }
    }

    /// `self += alpha · other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        axpy(alpha, &other.data, &mut self.data);
    }

    pub fn frobenius_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// A validated probability vector: non-negative entries summing to 1 (±1e-9).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbVec(Vec<f64>);

impl ProbVec {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::invalid("probability vector is empty"));
        }
        if p.iter().any(|x| !x.is_finite() || *x < 0.0 || *x > 1.0 + 1e-9) {
            return Err(Error::invalid("probability entries must lie in [0, 1]"));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("probabilities sum to {s}, not 1")));
        }
        Ok(Self(p))
    }

    pub fn uniform(dim: usize) -> Self {
        Self(vec![1.0 / dim as f64; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha · x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Element-wise mean of equal-length vectors.
pub fn mean_vec<'a, I>(vs: I, dim: usize) -> Vec<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for v in vs {
        axpy(1.0, v, &mut acc);
        n += 1;
    }
    if n > 0 {
        acc.iter_mut().for_each(|x| *x /= n as f64);
    }
    acc
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Temperature softmax with max subtraction.
pub fn softmax(v: &[f64], temperature: f64) -> Result<ProbVec> {
    if v.is_empty() {
        return Err(Error::invalid("softmax of empty vector"));
    }
    if !all_finite(v) {
        return Err(Error::invalid("softmax input must be finite"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid("softmax temperature must be positive"));
    }
    Ok(ProbVec(softmax_unchecked(v, temperature)))
}

pub(crate) fn softmax_unchecked(v: &[f64], temperature: f64) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = v.iter().map(|x| ((x - m) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter_mut().for_each(|x| *x /= s);
    e
}

/// `Σ p log p` with `0 log 0 = 0`.
fn neg_entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum()
}

/// Confidence weight `1 / (1 − Σ p log p)`, in (0, 1].
pub fn entropy_weight(p: &ProbVec) -> f64 {
    1.0 / (1.0 - neg_entropy(p.as_slice()))
}

/// Cosine similarity plus a flag raised when either vector has (near) zero norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<Cosine> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!(
            "cosine of vectors with dims {} and {}",
            u.len(),
            v.len()
        )));
    }
    if !all_finite(u) || !all_finite(v) {
        return Err(Error::invalid("cosine input must be finite"));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu < NORM_EPS || nv < NORM_EPS {
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Cosine {
        value: (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// `Σ p log(p / q)` with q floored at [`PROB_FLOOR`].
pub fn kl_divergence(p: &ProbVec, q: &ProbVec) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "KL divergence of distributions with dims {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(kl_unchecked(p.as_slice(), q.as_slice()))
}

pub(crate) fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(PROB_FLOOR).ln()))
        .sum::<f64>()
        .max(0.0)
}

/// `−log p(label)` with p floored at [`PROB_FLOOR`].
pub fn cross_entropy(p: &ProbVec, label: usize) -> Result<f64> {
    match p.as_slice().get(label) {
        Some(&pl) => Ok(-pl.max(PROB_FLOOR).ln()),
        None => Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            p.len()
        ))),
    }
}

/// Fixed parameters of the single-head token cross-attention.
///
/// A representation of dim `d` is split into `tokens` tokens of dim
/// `d / tokens`. Keys and values are the key/value-side tokens mapped through
/// square matrices with orthonormal columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CAParams {
    pub tokens: usize,
    pub w_key: Mat,
    pub w_value: Mat,
}

impl CAParams {
    pub fn new<R: Rng + ?Sized>(dim: usize, tokens: usize, rng: &mut R) -> Result<Self> {
        if tokens == 0 || dim == 0 || !dim.is_multiple_of(tokens) {
            return Err(Error::invalid(format!(
                "representation dim {dim} is not divisible by token count {tokens}"
            )));
        }
        let tok = dim / tokens;
        Ok(Self {
            tokens,
            w_key: Mat::random_orthonormal_columns(tok, tok, rng)?,
            w_value: Mat::random_orthonormal_columns(tok, tok, rng)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.tokens * self.w_key.cols()
    }
}

/// `q + Attn(q, kv)`: each query token attends over the projected key/value
/// tokens of `kv` with scaled dot-product weights.
pub fn cross_attention(q: &[f64], kv: &[f64], params: &CAParams) -> Result<Vec<f64>> {
    let d = params.dim();
    if q.len() != d || kv.len() != d {
        return Err(Error::invalid(format!(
            "cross-attention expects dim {d}, got query {} and key/value {}",
            q.len(),
            kv.len()
        )));
    }
    if !all_finite(q) || !all_finite(kv) {
        return Err(Error::invalid("cross-attention input must be finite"));
    }
    let tok = d / params.tokens;
    let scale = 1.0 / (tok as f64).sqrt();
    let keys: Vec<Vec<f64>> = kv.chunks_exact(tok).map(|t| params.w_key.matvec(t)).collect();
    let values: Vec<Vec<f64>> = kv
        .chunks_exact(tok)
        .map(|t| params.w_value.matvec(t))
        .collect();

    let mut out = q.to_vec();
    for (qt, ot) in q.chunks_exact(tok).zip(out.chunks_exact_mut(tok)) {
        let scores: Vec<f64> = keys.iter().map(|k| scale * dot(qt, k)).collect();
        let attn = softmax_unchecked(&scores, 1.0);
        for (a, v) in attn.iter().zip(&values) {
            axpy(*a, v, ot);
        }
    }
    Ok(out)
}
