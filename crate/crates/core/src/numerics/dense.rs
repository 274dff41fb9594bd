//! Dense row-major matrices and vectors.
//!
//! Problem sizes here are tiny (M=49, N<=8, K in the hundreds at most), so
//! everything is a plain `Vec` with no blocking or sparsity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    /// Build from row-major data; the length must equal `rows * cols`.
    pub fn new(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            *m.at_mut(i, i) = S::one();
        }
        m
    }

    /// Build from a closure over (row, col).
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> S {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut S {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.at(c, r))
    }

    /// Standard matrix product; rejects mismatched inner dimensions.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(r, k);
                if a == S::zero() {
                    continue;
                }
                let src = other.row(k);
                let dst = out.row_mut(r);
                for c in 0..other.cols {
                    dst[c] += a * src[c];
                }
            }
        }
        Ok(out)
    }

    /// Matrix-vector product.
    pub fn matvec(&self, v: &[S]) -> Result<Vec<S>> {
        if self.cols != v.len() {
            return Err(Error::Shape(format!(
                "matvec: {}x{} times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect())
    }

    /// Scale every row to unit L2 norm; errors on an all-zero row.
    pub fn l2_normalize_rows(&self) -> Result<Self> {
        let mut out = self.clone();
        for r in 0..self.rows {
            let norm = row_norm(out.row(r));
            if norm <= S::zero() {
                return Err(Error::ZeroNormRow { row: r });
            }
            for x in out.row_mut(r) {
                *x /= norm;
            }
        }
        Ok(out)
    }

    /// Frobenius inner product.
    pub fn frob_dot(&self, other: &Self) -> Result<S> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "frobenius product: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    /// In-place `self += factor * other`; used by gradient accumulation and SGD.
    pub fn add_scaled(&mut self, other: &Self, factor: S) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "add_scaled: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

fn row_norm<S: Scalar>(row: &[S]) -> S {
    row.iter().map(|&x| x * x).sum::<S>().sqrt()
}

/// Dense vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector<S> {
    data: Vec<S>,
}

impl<S: Scalar> Vector<S> {
    pub fn new(data: Vec<S>) -> Self {
        Self { data }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            data: vec![S::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, i: usize) -> S {
        self.data[i]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    pub fn dot(&self, other: &Self) -> Result<S> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "dot: lengths {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn l2_norm(&self) -> S {
        row_norm(&self.data)
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    /// Unit-normalized copy; errors if the norm is zero.
    pub fn normalized(&self) -> Result<Self> {
        let norm = self.l2_norm();
        if norm <= S::zero() {
            return Err(Error::ZeroNorm(format!(
                "cannot normalize a zero vector of length {}",
                self.len()
            )));
        }
        Ok(Self {
            data: self.data.iter().map(|&x| x / norm).collect(),
        })
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl<S: Scalar> From<Vec<S>> for Vector<S> {
    fn from(data: Vec<S>) -> Self {
        Self::new(data)
    }
}

/// Temperature softmax with max-subtraction for overflow safety.
///
/// Returns a probability vector over `scores / tau`; rejects `tau <= 0`.
pub fn softmax_temp<S: Scalar>(scores: &Vector<S>, tau: S) -> Result<Vector<S>> {
    if !(tau > S::zero()) {
        return Err(Error::InvalidParam(format!("softmax temperature {tau} must be > 0")));
    }
    if scores.is_empty() {
        return Err(Error::InvalidParam("softmax over an empty score vector".into()));
    }
    let scaled: Vec<S> = scores.as_slice().iter().map(|&x| x / tau).collect();
    let max = scaled.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = scaled.iter().map(|&x| (x - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    Ok(Vector::new(exps.into_iter().map(|e| e / total).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    type M = Matrix<f64>;
    type V = Vector<f64>;

    #[test]
    fn matmul_identity() {
        let a = M::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let id = M::identity(2);
        assert_eq!(id.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_orthogonal_rows() {
        let a = M::new(1, 2, vec![1.0, 0.0]).unwrap();
        let b = M::new(2, 1, vec![0.0, 1.0]).unwrap();
        let p = a.matmul(&b).unwrap();
        assert_eq!(p.data(), &[0.0]);
    }

    #[test]
    fn matmul_hand_example() {
        let a = M::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = M::new(2, 1, vec![5.0, 6.0]).unwrap();
        let p = a.matmul(&b).unwrap();
        assert_eq!(p.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error() {
        let a = M::zeros(2, 3);
        let b = M::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn normalize_three_four_five() {
        let m = M::new(1, 2, vec![3.0, 4.0]).unwrap();
        let n = m.l2_normalize_rows().unwrap();
        assert!((n.at(0, 0) - 0.6).abs() < 1e-15);
        assert!((n.at(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_axis_rows() {
        let m = M::new(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let n = m.l2_normalize_rows().unwrap();
        assert_eq!(n.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn normalize_zero_row_names_index() {
        let m = M::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        match m.l2_normalize_rows() {
            Err(Error::ZeroNormRow { row }) => assert_eq!(row, 1),
            other => panic!("expected zero-norm error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_equal_scores() {
        let p = softmax_temp(&V::new(vec![0.8, 0.8]), 1.0).unwrap();
        assert!((p.at(0) - 0.5).abs() < 1e-15);
        assert!((p.at(1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_hand_example() {
        // e^{0.8}/(e^{0.8}+e^{0.2}) = 0.64565...
        let p = softmax_temp(&V::new(vec![0.8, 0.2]), 1.0).unwrap();
        assert!((p.at(0) - 0.6457).abs() < 1e-4);
        assert!((p.at(1) - 0.3543).abs() < 1e-4);
    }

    #[test]
    fn softmax_single_score() {
        let p = softmax_temp(&V::new(vec![2.3]), 0.5).unwrap();
        assert_eq!(p.as_slice(), &[1.0]);
    }

    #[test]
    fn softmax_rejects_bad_tau() {
        assert!(softmax_temp(&V::new(vec![1.0]), 0.0).is_err());
        assert!(softmax_temp(&V::new(vec![1.0]), -1.0).is_err());
    }

    #[test]
    fn softmax_extreme_scores_stay_finite() {
        let p = softmax_temp(&V::new(vec![1000.0, -1000.0]), 0.01).unwrap();
        assert!(p.is_all_finite());
        assert!((p.sum() - 1.0).abs() < 1e-9);
    }
}
