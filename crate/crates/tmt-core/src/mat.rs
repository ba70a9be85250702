//! Small dense row-major matrices and the handful of kernels the model needs.
//!
//! Matrices here are a few hundred rows by at most a few thousand columns,
//! so there is no blocking or threading: the win comes from keeping every
//! inner loop a contiguous fused-multiply-add over a row slice, which the
//! compiler turns into wide SIMD with `target-cpu=native`.

use crate::{Error, Result, Scalar};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Mat<F> {
        Mat { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Mat<F>> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[F] {
        debug_assert!(r < self.rows);
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        debug_assert!(r < self.rows);
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
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

    /// Fresh transposed copy. Used to keep backward-pass products in the
    /// same cache-friendly row-times-row form as the forward pass.
    pub fn transposed(&self) -> Mat<F> {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            let src = self.row(r);
            for (c, &v) in src.iter().enumerate() {
                out.data[c * self.rows + r] = v;
            }
        }
        out
    }

    /// Convert element-wise to another scalar type (via f64).
    pub fn cast<G: Scalar>(&self) -> Mat<G> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| G::of_f64(v.as_f64())).collect(),
        }
    }
}

/// y += a * x, the only primitive the matrix products are built from.
#[inline]
pub fn axpy<F: Scalar>(y: &mut [F], a: F, x: &[F]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x.iter()) {
        *yi = a.mul_add(xi, *yi);
    }
}

/// Dot product with four independent accumulators so the loop vectorises.
#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        for l in 0..4 {
            acc[l] = a[j + l].mul_add(b[j + l], acc[l]);
        }
    }
    let mut tail = F::zero();
    for i in chunks * 4..a.len() {
        tail = a[i].mul_add(b[i], tail);
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// out += a · b, with a: m×k, b: k×n, out: m×n.
///
/// i-k-j loop order: the inner update is an `axpy` over a row of `b`, so
/// both streams are contiguous.
pub fn gemm_acc<F: Scalar>(a: &Mat<F>, b: &Mat<F>, out: &mut Mat<F>) {
    assert_eq!(a.cols, b.rows, "gemm inner dims {}x{} · {}x{}", a.rows, a.cols, b.rows, b.cols);
    assert_eq!(out.rows, a.rows, "gemm output rows");
    assert_eq!(out.cols, b.cols, "gemm output cols");
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * out.cols..(i + 1) * out.cols];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik != F::zero() {
                axpy(orow, aik, b.row(kk));
            }
        }
    }
}

/// out += aᵀ · b, with a: m×k, b: m×n, out: k×n.
///
/// The weight-gradient product: same axpy-over-rows shape as `gemm_acc`.
pub fn gemm_tn_acc<F: Scalar>(a: &Mat<F>, b: &Mat<F>, out: &mut Mat<F>) {
    assert_eq!(a.rows, b.rows, "gemm_tn shared dim");
    assert_eq!(out.rows, a.cols, "gemm_tn output rows");
    assert_eq!(out.cols, b.cols, "gemm_tn output cols");
    for m in 0..a.rows {
        let arow = a.row(m);
        let brow = &b.data[m * b.cols..(m + 1) * b.cols];
        for (kk, &amk) in arow.iter().enumerate() {
            if amk != F::zero() {
                axpy(&mut out.data[kk * out.cols..(kk + 1) * out.cols], amk, brow);
            }
        }
    }
}

/// out += a · bᵀ, with a: m×k, b: n×k, out: m×n. Row-dot-row form, used for
/// attention scores where k is a head dimension.
pub fn gemm_nt_acc<F: Scalar>(a: &Mat<F>, b: &Mat<F>, out: &mut Mat<F>) {
    assert_eq!(a.cols, b.cols, "gemm_nt shared dim");
    assert_eq!(out.rows, a.rows, "gemm_nt output rows");
    assert_eq!(out.cols, b.rows, "gemm_nt output cols");
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * out.cols..(i + 1) * out.cols];
        for (j, o) in orow.iter_mut().enumerate() {
            *o += dot(arow, b.row(j));
        }
    }
}

/// Numerically stable in-place softmax over a slice.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let mut max = F::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = F::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Stable log(Σ exp(x)) over a slice.
pub fn logsumexp<F: Scalar>(row: &[F]) -> F {
    let mut max = F::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    if max == F::neg_infinity() {
        return F::neg_infinity();
    }
    let mut sum = F::zero();
    for &v in row.iter() {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m64(rows: usize, cols: usize, v: &[f64]) -> Mat<f64> {
        Mat::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn gemm_matches_by_hand_2x3_3x2() {
        let a = m64(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = m64(3, 2, &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let mut out = Mat::zeros(2, 2);
        gemm_acc(&a, &b, &mut out);
        assert_eq!(out.data(), &[58.0, 64.0, 139.0, 154.0]);
        // Accumulates on a second call.
        gemm_acc(&a, &b, &mut out);
        assert_eq!(out.data(), &[116.0, 128.0, 278.0, 308.0]);
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transposes() {
        let mut rng = crate::rng_from_seed(5);
        let a = Mat::from_vec(4, 3, (0..12).map(|_| crate::rand_normal(&mut rng)).collect()).unwrap();
        let b = Mat::from_vec(4, 5, (0..20).map(|_| crate::rand_normal(&mut rng)).collect()).unwrap();

        // aᵀ·b via gemm_tn_acc == explicit transpose then gemm_acc.
        let mut got = Mat::zeros(3, 5);
        gemm_tn_acc(&a, &b, &mut got);
        let mut want = Mat::zeros(3, 5);
        gemm_acc(&a.transposed(), &b, &mut want);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }

        // a·cᵀ via gemm_nt_acc == explicit transpose then gemm_acc.
        let c = Mat::from_vec(5, 3, (0..15).map(|_| crate::rand_normal(&mut rng)).collect()).unwrap();
        let mut got2 = Mat::zeros(4, 5);
        gemm_nt_acc(&a, &c, &mut got2);
        let mut want2 = Mat::zeros(4, 5);
        gemm_acc(&a, &c.transposed(), &mut want2);
        for (g, w) in got2.data().iter().zip(want2.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn dot_handles_all_tail_lengths() {
        for n in 0..17 {
            let a: Vec<f64> = (0..n).map(|i| i as f64 + 1.0).collect();
            let b: Vec<f64> = (0..n).map(|i| 2.0 * i as f64 - 3.0).collect();
            let want: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert_eq!(dot(&a, &b), want, "n={n}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_order_is_preserved() {
        let mut row = vec![1.0f64, 3.0, 2.0, 3.0];
        softmax_in_place(&mut row);
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(row[1] > row[2] && row[2] > row[0]);
        assert_eq!(row[1], row[3]);
    }

    #[test]
    fn softmax_survives_large_magnitudes() {
        let mut row = vec![1000.0f64, 1000.0, 999.0];
        softmax_in_place(&mut row);
        assert!(row.iter().all(|v| v.is_finite()));
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_matches_naive_when_safe() {
        let row = vec![0.1f64, -0.3, 0.7, 0.0];
        let naive = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((logsumexp(&row) - naive).abs() < 1e-12);
        // Stable for shifted copies: lse(x + c) = lse(x) + c.
        let shifted: Vec<f64> = row.iter().map(|v| v + 500.0).collect();
        assert!((logsumexp(&shifted) - (logsumexp(&row) + 500.0)).abs() < 1e-9);
        assert_eq!(logsumexp::<f64>(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(Mat::<f64>::from_vec(2, 2, vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn transpose_roundtrips() {
        let a = m64(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(a.transposed().transposed(), a);
    }
}
