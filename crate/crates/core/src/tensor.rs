//! Dense f32 kernels on row-major matrices.
//!
//! Every reduction runs in a fixed order so results are bit-stable across
//! runs, batch shapes and worker counts: a row's output never depends on the
//! other rows in the batch.

use crate::error::{Error, Result};

/// Row-major matrix of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!("ragged rows: {} vs {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn row_vector(values: &[f32]) -> Self {
        Self { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Copies the given rows, in the given order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: indices.len(), cols: self.cols, data }
    }

    /// Element-wise sum.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot add {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Raw little-endian bytes of the data buffer.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Standard matrix product `a · b`.
///
/// Each output cell accumulates `a[i][p] * b[p][j]` for increasing `p`, the
/// same sequence of operations as the textbook triple loop.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Matrix { rows: m, cols: n, data: out })
}

/// `a · bᵀ`, used for the tied language-model head.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "matmul {}x{} by ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    Ok(Matrix { rows: m, cols: n, data: out })
}

/// A probability distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f32>);

/// Allowed deviation of a distribution's total mass from one.
pub const MASS_TOLERANCE: f32 = 1e-4;

impl ProbVector {
    pub fn new(probs: Vec<f32>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("probability vector"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Consistency("probabilities must be finite and non-negative".into()));
        }
        let mass: f64 = probs.iter().map(|&p| p as f64).sum();
        if (mass - 1.0).abs() > MASS_TOLERANCE as f64 {
            return Err(Error::Consistency(format!("probabilities sum to {mass}")));
        }
        Ok(Self(probs))
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut probs = vec![0.0; len];
        probs[index] = 1.0;
        Self(probs)
    }

    pub fn uniform(len: usize) -> Self {
        Self(vec![1.0 / len as f32; len])
    }

    /// `norm(w)`: rescales non-negative weights to unit mass. Returns `None`
    /// when the total mass is below `min_mass`.
    pub fn normalized(weights: &[f64], min_mass: f64) -> Option<Self> {
        let mass: f64 = weights.iter().sum();
        if !(mass >= min_mass) || !mass.is_finite() {
            return None;
        }
        Some(Self(weights.iter().map(|w| (w / mass) as f32).collect()))
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn get(&self, token: usize) -> f32 {
        self.0[token]
    }

    #[inline]
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// Inverse-CDF sample for `u` in `[0, 1)`. Zero-probability entries are
    /// never returned.
    pub fn sample(&self, u: f64) -> usize {
        let total: f64 = self.0.iter().map(|&p| p as f64).sum();
        let target = u * total;
        let mut acc = 0.0f64;
        let mut last_positive = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            acc += p as f64;
            last_positive = i;
            if target < acc {
                return i;
            }
        }
        last_positive
    }

    /// Indices of the `k` largest probabilities in descending order; ties
    /// are broken by lower index first.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.0.len()).collect();
        idx.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }
}

/// Inverse-CDF sample over non-negative weights (not necessarily
/// normalized). Zero-weight entries are never returned.
pub fn sample_weights(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    let target = u * total;
    let mut acc = 0.0f64;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last_positive = i;
        if target < acc {
            return i;
        }
    }
    last_positive
}

/// Lowest index of the maximum value.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Temperature softmax. `temperature == 0` is the greedy limit: a one-hot
/// vector at the lowest-index argmax.
pub fn softmax_temp(logits: &[f32], temperature: f32) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::Config(format!("temperature {temperature} must be finite and >= 0")));
    }
    if temperature == 0.0 {
        return Ok(ProbVector::one_hot(logits.len(), argmax(logits)));
    }
    let max = logits[argmax(logits)];
    let mut probs: Vec<f32> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let mut sum = 0.0f32;
    for p in &probs {
        sum += p;
    }
    for p in &mut probs {
        *p /= sum;
    }
    Ok(ProbVector(probs))
}

pub const DEFAULT_NORM_EPS: f32 = 1e-5;

/// `h / sqrt(mean(h²) + eps) ⊙ gain`.
pub fn rms_norm(h: &[f32], gain: &[f32], eps: f32) -> Result<Vec<f32>> {
    if h.len() != gain.len() {
        return Err(Error::Shape(format!("rms_norm width {} vs gain {}", h.len(), gain.len())));
    }
    let mut ms = 0.0f32;
    for v in h {
        ms += v * v;
    }
    ms /= h.len() as f32;
    let inv = 1.0 / (ms + eps).sqrt();
    Ok(h.iter().zip(gain).map(|(v, g)| v * inv * g).collect())
}

/// Row-wise [`rms_norm`].
pub fn rms_norm_rows(h: &Matrix, gain: &[f32], eps: f32) -> Result<Matrix> {
    let mut out = Vec::with_capacity(h.data.len());
    for row in h.iter_rows() {
        out.extend(rms_norm(row, gain, eps)?);
    }
    Matrix::from_vec(h.rows, h.cols, out)
}

/// Cosine similarity, clamped to `[-1, 1]`. Identical non-zero inputs give
/// exactly `1.0`.
pub fn cosine_sim(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of widths {} and {}", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0.0f32, 0.0f32, 0.0f32);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 && nb == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    // The f64 product of two f32 values is exact, so a == b yields dot / na.
    let cos = dot as f64 / (na as f64 * nb as f64).sqrt();
    Ok(cos.clamp(-1.0, 1.0) as f32)
}

pub const ROPE_BASE: f64 = 10_000.0;

/// Rotary position encoding applied head by head to adjacent pairs
/// `(2i, 2i+1)` with angle `position · base^(-2i/head_dim)`.
pub fn apply_rope(qk: &Matrix, positions: &[usize], head_dim: usize) -> Result<Matrix> {
    if head_dim == 0 || head_dim % 2 != 0 {
        return Err(Error::Config(format!("head dimension {head_dim} must be even and non-zero")));
    }
    if qk.cols % head_dim != 0 {
        return Err(Error::Shape(format!("width {} is not a multiple of {head_dim}", qk.cols)));
    }
    if positions.len() != qk.rows {
        return Err(Error::Shape(format!(
            "{} positions for {} rows",
            positions.len(),
            qk.rows
        )));
    }
    let mut out = qk.clone();
    let half = head_dim / 2;
    for (r, &pos) in positions.iter().enumerate() {
        if pos == 0 {
            continue;
        }
        let angles: Vec<(f32, f32)> = (0..half)
            .map(|i| {
                let inv_freq = ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
                let (s, c) = (pos as f64 * inv_freq).sin_cos();
                (s as f32, c as f32)
            })
            .collect();
        let row = out.row_mut(r);
        for head in row.chunks_exact_mut(head_dim) {
            for (pair, &(s, c)) in head.chunks_exact_mut(2).zip(&angles) {
                let (x0, x1) = (pair[0], pair[1]);
                pair[0] = x0 * c - x1 * s;
                pair[1] = x0 * s + x1 * c;
            }
        }
    }
    Ok(out)
}
