//! Dense row-major matrices and the handful of kernels the model needs.
//!
//! Matrix products go through `matrixmultiply`, which is single-threaded and
//! uses a summation order that depends only on the operand shapes, so results
//! are reproducible run to run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "tensor data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor by evaluating `f(row, col)` for every entry.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn count_zeros(&self) -> usize {
        self.data.iter().filter(|v| **v == 0.0).count()
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor2D) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn view(&self) -> View<'_> {
        View::full(&self.data, self.rows, self.cols)
    }

    pub fn view_mut(&mut self) -> ViewMut<'_> {
        ViewMut::full(&mut self.data, self.rows, self.cols)
    }

    /// `self · other`
    pub fn matmul(&self, other: &Tensor2D) -> Tensor2D {
        let mut out = Tensor2D::zeros(self.rows, other.cols);
        gemm(1.0, self.view(), other.view(), 0.0, out.view_mut());
        out
    }
}

/// Strided read-only window into a flat buffer.
#[derive(Debug, Clone, Copy)]
pub struct View<'a> {
    data: &'a [f64],
    offset: usize,
    rows: usize,
    cols: usize,
    row_stride: usize,
    col_stride: usize,
}

impl<'a> View<'a> {
    pub fn full(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self::strided(data, 0, rows, cols, cols, 1)
    }

    pub fn strided(
        data: &'a [f64],
        offset: usize,
        rows: usize,
        cols: usize,
        row_stride: usize,
        col_stride: usize,
    ) -> Self {
        assert!(
            fits(data.len(), offset, rows, cols, row_stride, col_stride),
            "view out of bounds"
        );
        Self {
            data,
            offset,
            rows,
            cols,
            row_stride,
            col_stride,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// Strided writable window into a flat buffer.
#[derive(Debug)]
pub struct ViewMut<'a> {
    data: &'a mut [f64],
    offset: usize,
    rows: usize,
    cols: usize,
    row_stride: usize,
    col_stride: usize,
}

impl<'a> ViewMut<'a> {
    pub fn full(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        Self::strided(data, 0, rows, cols, cols, 1)
    }

    pub fn strided(
        data: &'a mut [f64],
        offset: usize,
        rows: usize,
        cols: usize,
        row_stride: usize,
        col_stride: usize,
    ) -> Self {
        assert!(
            fits(data.len(), offset, rows, cols, row_stride, col_stride),
            "view out of bounds"
        );
        Self {
            data,
            offset,
            rows,
            cols,
            row_stride,
            col_stride,
        }
    }
}

fn fits(len: usize, offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> bool {
    if rows == 0 || cols == 0 {
        return offset <= len;
    }
    offset + (rows - 1) * rs + (cols - 1) * cs < len
}

/// `c = alpha · a · b + beta · c`
pub fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: ViewMut<'_>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output shape mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        // matrixmultiply handles k = 0, but keep beta semantics explicit.
        for r in 0..m {
            for col in 0..n {
                let idx = c.offset + r * c.row_stride + col * c.col_stride;
                c.data[idx] *= beta;
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked on construction, and `c` holds a
    // unique borrow so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.row_stride as isize,
            c.col_stride as isize,
        );
    }
}

/// In-place numerically stable softmax over a row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `ln Σ exp(row)` computed without overflow.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor2D, b: &Tensor2D) -> Tensor2D {
        Tensor2D::from_fn(a.rows(), b.cols(), |r, c| {
            (0..a.cols()).map(|k| a.get(r, k) * b.get(k, c)).sum()
        })
    }

    #[test]
    fn matmul_matches_naive_product() {
        let a = Tensor2D::from_fn(5, 7, |r, c| (r as f64 * 0.3 - c as f64 * 0.17).sin());
        let b = Tensor2D::from_fn(7, 3, |r, c| (r as f64 * 0.11 + c as f64).cos());
        assert!(a.matmul(&b).max_abs_diff(&naive(&a, &b)) < 1e-12);
    }

    #[test]
    fn transposed_views_need_no_copy() {
        let a = Tensor2D::from_fn(4, 6, |r, c| (r * 6 + c) as f64 * 0.01);
        let b = Tensor2D::from_fn(4, 2, |r, c| r as f64 - c as f64);
        let mut out = Tensor2D::zeros(6, 2);
        gemm(1.0, a.view().t(), b.view(), 0.0, out.view_mut());
        let at = Tensor2D::from_fn(6, 4, |r, c| a.get(c, r));
        assert!(out.max_abs_diff(&naive(&at, &b)) < 1e-12);
    }

    #[test]
    fn gemm_accumulates_with_beta() {
        let a = Tensor2D::filled(2, 2, 1.0);
        let mut out = Tensor2D::filled(2, 2, 5.0);
        gemm(1.0, a.view(), a.view(), 1.0, out.view_mut());
        assert_eq!(out.as_slice(), &[7.0, 7.0, 7.0, 7.0]);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut row = vec![1000.0, -5.0, 3.0, 999.5];
        softmax_in_place(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((log_sum_exp(&[0.0; 8]) - 8f64.ln()).abs() < 1e-15);
    }

    #[test]
    #[should_panic(expected = "view out of bounds")]
    fn oversized_view_is_rejected() {
        let data = [0.0; 4];
        let _ = View::full(&data, 3, 2);
    }
}
