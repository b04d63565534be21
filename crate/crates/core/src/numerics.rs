//! Dense row-major matrices and the small set of differentiable primitives the
//! adapter engine is built on: softmax, cosine-similarity contrastive loss,
//! KL divergence, and a central-difference gradient oracle.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to the second argument of [`kl_divergence`] before renormalizing.
pub const KL_FLOOR: f64 = 1e-12;

/// Default temperature of the contrastive head.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl From<Matrix> for RawMatrix {
    fn from(m: Matrix) -> Self {
        RawMatrix {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        }
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("matrix entry is not finite".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Matrix::new(1, values.len(), values.to_vec())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies the selected rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Drops one row.
    pub fn remove_row(&mut self, r: usize) {
        self.data.drain(r * self.cols..(r + 1) * self.cols);
        self.rows -= 1;
    }

    /// Appends a row; an empty 0xN matrix adopts the row width.
    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows == 0 && self.data.is_empty() {
            self.cols = row.len();
        }
        if row.len() != self.cols {
            return Err(Error::Dimension(format!(
                "row of width {} pushed onto {}-column matrix",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    fn check_same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "{op}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "matmul {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "matmul_t {:?} x {:?}ᵀ",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Matrix::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        }))
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Dimension(format!(
                "t_matmul {:?}ᵀ x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Column-wise mean over rows.
    pub fn mean_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        let n = self.rows.max(1) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// A probability vector: entries in `[0, 1]` summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub const SUM_TOL: f64 = 1e-12;

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Dimension("empty probability vector".into()));
        }
        if values
            .iter()
            .any(|&v| !v.is_finite() || !(0.0..=1.0).contains(&v))
        {
            return Err(Error::Numeric("probability outside [0, 1]".into()));
        }
        let sum: f64 = values.iter().sum();
        // accumulated rounding grows with length
        if (sum - 1.0).abs() > Self::SUM_TOL.max(values.len() as f64 * f64::EPSILON * 4.0) {
            return Err(Error::Numeric(format!("probabilities sum to {sum}")));
        }
        Ok(ProbVector(values))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        ProbVector::new(vec![1.0 / n as f64; n])
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

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ProbVector::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn softmax_raw(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::Dimension("softmax of empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    Ok(ProbVector(softmax_raw(logits)))
}

/// `KL(p ‖ q)` with `0·ln 0 = 0`. `q` is floored at [`KL_FLOOR`] and renormalized.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!(
            "kl_divergence over {} vs {} entries",
            p.len(),
            q.len()
        )));
    }
    let floored: Vec<f64> = q.as_slice().iter().map(|&v| v.max(KL_FLOOR)).collect();
    let z: f64 = floored.iter().sum();
    let kl: f64 = p
        .as_slice()
        .iter()
        .zip(&floored)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / (qi / z)).ln())
        .sum();
    Ok(kl.max(0.0))
}

/// Rows scaled to unit length, plus the original norms.
pub fn normalize_rows(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let n = l2_norm(m.row(r));
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Numeric(format!("row {r} has zero or non-finite norm")));
        }
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Cosine similarity of every row of `a` against every row of `b`.
pub fn cosine_similarity(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let (an, _) = normalize_rows(a)?;
    let (bn, _) = normalize_rows(b)?;
    an.matmul_t(&bn)
}

/// Image-to-text cross-entropy over cosine similarities scaled by `1/temperature`,
/// averaged over the batch. Returns the loss and its gradient with respect to
/// the (unnormalized) image embeddings; the text side is treated as frozen.
pub fn contrastive_loss(
    img_emb: &Matrix,
    txt_emb: &Matrix,
    labels: &[usize],
    temperature: f64,
) -> Result<(f64, Matrix)> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Numeric(format!("temperature {temperature}")));
    }
    if img_emb.cols() != txt_emb.cols() {
        return Err(Error::Dimension(format!(
            "image dim {} vs text dim {}",
            img_emb.cols(),
            txt_emb.cols()
        )));
    }
    if labels.len() != img_emb.rows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} images",
            labels.len(),
            img_emb.rows()
        )));
    }
    let n_classes = txt_emb.rows();
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::Index(format!("label {bad} with {n_classes} classes")));
    }
    let batch = img_emb.rows();
    if batch == 0 {
        return Err(Error::Dimension("empty batch".into()));
    }

    let (u, norms) = normalize_rows(img_emb)?;
    let (v, _) = normalize_rows(txt_emb)?;
    let sims = u.matmul_t(&v)?;

    let inv_t = 1.0 / temperature;
    let scale = 1.0 / batch as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(batch, img_emb.cols());
    for i in 0..batch {
        let logits: Vec<f64> = sims.row(i).iter().map(|s| s * inv_t).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - logits[labels[i]];

        let probs = softmax_raw(&logits);
        // dL/du_i = Σ_c (p_c − [c = y]) v_c / (T·B)
        let mut grad_u = vec![0.0; img_emb.cols()];
        for (c, &p) in probs.iter().enumerate() {
            let coeff = (p - if c == labels[i] { 1.0 } else { 0.0 }) * inv_t * scale;
            for (g, vc) in grad_u.iter_mut().zip(v.row(c)) {
                *g += coeff * vc;
            }
        }
        // project through the row normalization
        let ui = u.row(i);
        let radial = dot(ui, &grad_u);
        for ((g, gu), uk) in grad.row_mut(i).iter_mut().zip(&grad_u).zip(ui) {
            *g = (gu - radial * uk) / norms[i];
        }
    }
    let loss = loss * scale;
    if !loss.is_finite() {
        return Err(Error::Numeric("contrastive loss is not finite".into()));
    }
    Ok((loss, grad))
}

/// Central-difference gradient of a scalar function of a matrix.
pub fn finite_diff_grad(
    f: impl Fn(&Matrix) -> f64,
    x: &Matrix,
    h: f64,
) -> Result<Matrix> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for k in 0..x.len() {
        let orig = probe.data[k];
        probe.data[k] = orig + h;
        let up = f(&probe);
        probe.data[k] = orig - h;
        let down = f(&probe);
        probe.data[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "function not finite around coordinate {k}"
            )));
        }
        grad.data[k] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}
