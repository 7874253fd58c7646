//! Minimal row-major dense matrix.
//!
//! The kernels in this crate are small enough that a flat `Vec` with
//! explicit loops beats pulling in a linear-algebra stack; this type only
//! carries the shape around.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape does not match data length");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
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
    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut F {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn fill(&mut self, v: F) {
        self.data.fill(v);
    }

    /// Appends a row, growing the matrix. Panics on width mismatch.
    pub fn push_row(&mut self, row: &[F]) {
        assert_eq!(row.len(), self.cols, "row width mismatch");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    /// Drops all rows past `rows`, keeping capacity.
    pub fn truncate_rows(&mut self, rows: usize) {
        assert!(rows <= self.rows);
        self.data.truncate(rows * self.cols);
        self.rows = rows;
    }

    pub fn iter(&self) -> impl Iterator<Item = &F> {
        self.data.iter()
    }
}

/// Dot product of two equal-length slices, accumulated left to right.
#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        acc += *x * *y;
    }
    acc
}

/// `out += a * s` elementwise.
#[inline]
pub fn axpy<F: Scalar>(out: &mut [F], a: &[F], s: F) {
    debug_assert_eq!(out.len(), a.len());
    for (o, x) in out.iter_mut().zip(a.iter()) {
        *o += *x * s;
    }
}

/// `y = x * w` where `x` is length `in_dim` and `w` is `in_dim x out_dim`.
pub fn vecmat<F: Scalar>(x: &[F], w: &Mat<F>, y: &mut [F]) {
    debug_assert_eq!(x.len(), w.rows());
    debug_assert_eq!(y.len(), w.cols());
    y.fill(F::zero());
    for (i, &xi) in x.iter().enumerate() {
        axpy(y, w.row(i), xi);
    }
}

/// Numerically safe log-sum-exp of a slice.
pub fn log_sum_exp<F: Scalar>(xs: &[F]) -> F {
    let m = xs.iter().cloned().fold(F::neg_infinity(), F::max);
    if m == F::neg_infinity() {
        return F::neg_infinity();
    }
    let mut s = F::zero();
    for &x in xs {
        s += (x - m).exp();
    }
    m + s.ln()
}

/// In-place softmax with max subtraction.
pub fn softmax_in_place<F: Scalar>(xs: &mut [F]) {
    let m = xs.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in xs.iter_mut() {
        *x /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vecmat_matches_manual() {
        let w = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = [10.0, 100.0];
        let mut y = [0.0; 3];
        vecmat(&x, &w, &mut y);
        assert_eq!(y, [410.0, 520.0, 630.0]);
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let xs = [1000.0_f64, 1000.0];
        let lse = log_sum_exp(&xs);
        assert!((lse - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-9);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut xs = [0.3_f64, -2.0, 5.0, 0.0];
        softmax_in_place(&mut xs);
        let s: f64 = xs.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
