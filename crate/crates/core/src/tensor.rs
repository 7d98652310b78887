//! Dense f32 kernels shared by the toy model and the selectors.
//!
//! Everything here is a pure function over borrowed inputs. Ranking uses a
//! total order (score descending, then lower index), so every selection is
//! deterministic even when scores tie.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix2D {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix2D) -> Result<Matrix2D> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix2D::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let dst = out.row_mut(r);
            vec_mat_into(self.row(r), rhs, dst);
        }
        Ok(out)
    }
}

/// `dst = x · m` for a row vector `x` of length `m.rows()`.
pub fn vec_mat_into(x: &[f32], m: &Matrix2D, dst: &mut [f32]) {
    debug_assert_eq!(x.len(), m.rows);
    debug_assert_eq!(dst.len(), m.cols);
    dst.iter_mut().for_each(|d| *d = 0.0);
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        for (d, &w) in dst.iter_mut().zip(m.row(k)) {
            *d += xk * w;
        }
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// In-place numerically stable softmax of `logits * scale`.
pub fn softmax_in_place(row: &mut [f32], scale: f32) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x * scale));
    let mut sum = 0.0f64;
    for x in row.iter_mut() {
        *x = (*x * scale - max).exp();
        sum += f64::from(*x);
    }
    let inv = (1.0 / sum) as f32;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Softmax of every row of `m`, after multiplying the logits by `scale`.
pub fn softmax_rows(m: &Matrix2D, scale: f32) -> Result<Matrix2D> {
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::EmptyInput);
    }
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r), scale);
    }
    Ok(out)
}

/// Stride-1 max pooling with edge clipping; output has the input's length.
pub fn pool1d_max(v: &[f32], kernel: usize) -> Result<Vec<f32>> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::InvalidKernel(kernel));
    }
    let half = kernel / 2;
    let n = v.len();
    Ok((0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            v[lo..hi].iter().copied().fold(f32::NEG_INFINITY, f32::max)
        })
        .collect())
}

/// Score-descending, index-ascending order.
#[inline]
pub fn rank_cmp(a_score: f32, a_idx: usize, b_score: f32, b_idx: usize) -> Ordering {
    b_score.total_cmp(&a_score).then(a_idx.cmp(&b_idx))
}

/// The `k` best of `0..n` under `cmp` (a strict total order, "less" = better),
/// returned best first.
pub fn select_best<F>(n: usize, k: usize, mut cmp: F) -> Vec<usize>
where
    F: FnMut(usize, usize) -> Ordering,
{
    let k = k.min(n);
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if k < n {
        idx.select_nth_unstable_by(k - 1, |&a, &b| cmp(a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| cmp(a, b));
    idx
}

/// Indices of the `k` largest values in rank order (largest first, ties to the lower index).
pub fn top_k_ranked(v: &[f32], k: usize) -> Result<Vec<usize>> {
    if k > v.len() {
        return Err(Error::KExceedsLength { k, len: v.len() });
    }
    Ok(select_best(v.len(), k, |a, b| rank_cmp(v[a], a, v[b], b)))
}

/// Indices of the `k` largest values, sorted ascending by index.
pub fn top_k_indices(v: &[f32], k: usize) -> Result<Vec<usize>> {
    let mut idx = top_k_ranked(v, k)?;
    idx.sort_unstable();
    Ok(idx)
}
