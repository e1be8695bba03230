//! Dense vector/matrix primitives shared by every other module.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`. [`Mat`] is a small row-major
//! matrix, and [`ProbVector`] is a validated point on the probability simplex.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|sum - 1|` for a vector to count as a distribution.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::arg("matrix dimensions must be positive"));
        }
        if values.len() != rows * cols {
            return Err(Error::arg(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("matrix entries must be finite"));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::arg("ragged matrix rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::arg(format!(
                "matvec: matrix has {} columns, vector has {} entries",
                self.cols,
                x.len()
            )));
        }
        Ok(self.values.chunks(self.cols).map(|row| dot(row, x)).collect())
    }

    /// `selfᵀ · y`
    pub fn transpose_matvec(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::arg("transpose_matvec: dimension mismatch"));
        }
        let mut out = vec![0.0; self.cols];
        for (row, &yi) in self.values.chunks(self.cols).zip(y) {
            axpy(yi, row, &mut out);
        }
        Ok(out)
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.values[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.values[i * self.cols + j]
    }
}

/// A probability distribution over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates nonnegativity, finiteness and unit sum (within [`SIMPLEX_TOL`]).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::arg("empty probability vector"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::arg("probabilities must be finite and nonnegative"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::arg(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self(probs))
    }

    /// Normalizes a nonnegative weight vector with positive mass.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::arg("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegenerateInput("weights have zero mass".into()));
        }
        Self::new(weights.into_iter().map(|w| w / total).collect())
    }

    /// Skips validation; callers guarantee the simplex invariant.
    pub(crate) fn new_unchecked(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        Self(probs)
    }

    pub fn uniform(k: usize) -> Self {
        assert!(k > 0, "uniform distribution over zero classes");
        Self(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, class: usize) -> Self {
        let mut v = vec![0.0; k];
        v[class] = 1.0;
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
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

pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::arg("softmax of an empty vector"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::arg("softmax input must be finite"));
    }
    Ok(ProbVector(softmax_unchecked(logits)))
}

/// Max-subtracted softmax for inputs already known to be finite and nonempty.
pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::arg(format!("cosine: lengths {} and {} differ", a.len(), b.len())));
    }
    let (na, nb) = (norm2(a), norm2(b));
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Err(Error::DegenerateInput("cosine of a zero-norm vector".into()));
    }
    if a == b {
        return Ok(1.0);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn l1_distance(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::arg("l1_distance: length mismatch"));
    }
    Ok(p.as_slice().iter().zip(q.as_slice()).map(|(a, b)| (a - b).abs()).sum())
}

/// Minimizes `‖Mx − v‖² + ridge·‖x‖²` through the normal equations
/// `(MᵀM + ridge·I) x = Mᵀv`, solved by Gaussian elimination with partial
/// pivoting.
pub fn solve_regularized(m: &Mat, v: &[f64], ridge: f64) -> Result<Vec<f64>> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::arg("solve_regularized needs a square matrix"));
    }
    if v.len() != n {
        return Err(Error::arg("solve_regularized: rhs length mismatch"));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::arg("ridge must be finite and nonnegative"));
    }

    // Augmented normal system [MᵀM + ridge·I | Mᵀv].
    let w = n + 1;
    let mut a = vec![0.0; n * w];
    for i in 0..n {
        for j in 0..n {
            a[i * w + j] = (0..n).map(|k| m[(k, i)] * m[(k, j)]).sum::<f64>();
        }
        a[i * w + i] += ridge;
        a[i * w + n] = (0..n).map(|k| m[(k, i)] * v[k]).sum::<f64>();
    }
    let scale = a
        .chunks(w)
        .flat_map(|r| r[..n].iter())
        .fold(0.0f64, |acc, x| acc.max(x.abs()));
    if scale == 0.0 {
        return Err(Error::IllConditioned { smallest_singular: 0.0 });
    }

    let mut min_pivot = f64::INFINITY;
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r1, &r2| a[r1 * w + col].abs().total_cmp(&a[r2 * w + col].abs()))
            .expect("nonempty pivot range");
        if pivot_row != col {
            for j in 0..w {
                a.swap(col * w + j, pivot_row * w + j);
            }
        }
        let pivot = a[col * w + col];
        min_pivot = min_pivot.min(pivot.abs());
        if pivot.abs() <= 1e-12 * scale {
            // Pivots of the normal matrix approximate squared singular values.
            return Err(Error::IllConditioned { smallest_singular: pivot.abs().sqrt() });
        }
        for r in col + 1..n {
            let factor = a[r * w + col] / pivot;
            if factor != 0.0 {
                for j in col..w {
                    a[r * w + j] -= factor * a[col * w + j];
                }
            }
        }
    }

    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let tail: f64 = (i + 1..n).map(|j| a[i * w + j] * x[j]).sum();
        x[i] = (a[i * w + n] - tail) / a[i * w + i];
    }
    if x.iter().any(|xi| !xi.is_finite()) {
        return Err(Error::Numeric(format!("non-finite solution (min pivot {min_pivot:e})")));
    }
    Ok(x)
}

/// Euclidean projection onto the probability simplex (sorted-threshold).
///
/// Inputs that already are valid distributions come back unchanged.
pub fn simplex_project(v: &[f64]) -> Result<ProbVector> {
    if v.is_empty() {
        return Err(Error::arg("cannot project an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::arg("simplex_project input must be finite"));
    }
    if let Ok(p) = ProbVector::new(v.to_vec()) {
        return Ok(p);
    }

    let mut sorted = v.to_vec();
    // Stable descending sort keeps ties in index order.
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut threshold = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            threshold = candidate;
        }
    }
    let mut out: Vec<f64> = v.iter().map(|x| (x - threshold).max(0.0)).collect();
    let total: f64 = out.iter().sum();
    for x in &mut out {
        *x /= total;
    }
    ProbVector::new(out)
}
