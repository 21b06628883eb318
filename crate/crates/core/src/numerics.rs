//! Dense scalar and matrix primitives shared by the rest of the crate.
//!
//! Everything here is a pure function of its inputs. Matrices are small
//! (a few hundred rows at most) so plain row-major `Vec<f64>` storage and
//! naive triple loops are all that is needed.

use std::fmt;

use crate::error::{Error, Result};

/// Smallest pivot magnitude accepted by the LU factorization.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Default ridge added to the fused textual self-attention before inversion.
pub const DEFAULT_RIDGE: f64 = 1e-6;

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} entries", rows * cols),
                format!("{} entries", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended for
    /// literals in tests and fixtures.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
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

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Copies the block `rows × cols` starting at (`row0`, `col0`).
    pub fn block(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> Matrix {
        assert!(row0 + rows <= self.rows && col0 + cols <= self.cols);
        Matrix::from_fn(rows, cols, |r, c| self.get(row0 + r, col0 + c))
    }

    /// Columns `[col0, col0 + cols)` of every row.
    pub fn column_block(&self, col0: usize, cols: usize) -> Matrix {
        self.block(0, col0, self.rows, cols)
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape("vstack", self.cols, other.cols));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("lhs cols = rhs rows = {}", self.cols),
                format!("rhs rows {}", other.rows),
            ));
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
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape("matmul_transposed", self.cols, other.cols));
        }
        Ok(Matrix::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        }))
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(Error::shape("matvec", self.cols, v.len()));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "add_assign",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        max_abs_diff(&self.data, &other.data)
    }

    /// `self + epsilon·I`; `self` must be square.
    pub fn add_ridge(&self, epsilon: f64) -> Matrix {
        let mut m = self.clone();
        for i in 0..self.rows.min(self.cols) {
            m.data[i * self.cols + i] += epsilon;
        }
        m
    }
}

/// Owned vector of reals, e.g. a flattened map over visual tokens.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> Option<usize> {
        argmax(&self.0)
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    if !m.is_finite() {
        return Err(Error::NonFiniteLogits);
    }
    let mut out = m.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

/// Min-max rescale to [0, 1]. A constant vector maps to all zeros.
pub fn minmax_normalize(v: &Vector) -> Vector {
    let (lo, hi) = v
        .0
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let span = hi - lo;
    if !(span > 0.0) {
        return Vector(vec![0.0; v.len()]);
    }
    Vector(v.0.iter().map(|&x| (x - lo) / span).collect())
}

/// LU factorization with partial pivoting, stored compactly.
struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    fn factor(m: &Matrix) -> Result<Lu> {
        let n = m.rows;
        let mut lu = m.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pivot) = (k..n)
                .map(|r| (r, lu[r * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if !(pivot >= PIVOT_TOLERANCE) {
                return Err(Error::SingularMatrix);
            }
            if p != k {
                for c in 0..n {
                    lu.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
            }
            let diag = lu[k * n + k];
            for r in k + 1..n {
                let f = lu[r * n + k] / diag;
                lu[r * n + k] = f;
                if f != 0.0 {
                    for c in k + 1..n {
                        lu[r * n + c] -= f * lu[k * n + c];
                    }
                }
            }
        }
        Ok(Lu { n, lu, perm })
    }

    /// Solves `A x = e_col` in place for every unit vector, yielding A⁻¹.
    fn inverse(&self) -> Matrix {
        let n = self.n;
        let mut inv = Matrix::zeros(n, n);
        let mut x = vec![0.0; n];
        for col in 0..n {
            for (i, xi) in x.iter_mut().enumerate() {
                *xi = if self.perm[i] == col { 1.0 } else { 0.0 };
            }
            for i in 0..n {
                let mut s = x[i];
                for j in 0..i {
                    s -= self.lu[i * n + j] * x[j];
                }
                x[i] = s;
            }
            for i in (0..n).rev() {
                let mut s = x[i];
                for j in i + 1..n {
                    s -= self.lu[i * n + j] * x[j];
                }
                x[i] = s / self.lu[i * n + i];
            }
            for i in 0..n {
                inv.set(i, col, x[i]);
            }
        }
        inv
    }
}

/// `(m + epsilon·I)⁻¹` via partial-pivot LU.
pub fn ridge_inverse(m: &Matrix, epsilon: f64) -> Result<Matrix> {
    if m.rows != m.cols {
        return Err(Error::shape(
            "ridge_inverse",
            "square matrix",
            format!("{}x{}", m.rows, m.cols),
        ));
    }
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "ridge epsilon must be a finite non-negative real, got {epsilon}"
        )));
    }
    if !m.is_finite() {
        return Err(Error::SingularMatrix);
    }
    Ok(Lu::factor(&m.add_ridge(epsilon))?.inverse())
}

/// Nearest-rank percentile: the element at 1-based ascending rank
/// `ceil(lambda/100 · len)`, clamped to `[1, len]`.
pub fn percentile_threshold(v: &[f64], lambda: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&lambda) {
        return Err(Error::InvalidPercentile(lambda));
    }
    if v.is_empty() {
        return Err(Error::shape("percentile_threshold", "len >= 1", 0));
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((lambda * n as f64) / 100.0).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Matrix::zeros(2, 2)).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.5));
        let s = softmax_rows(&Matrix::from_rows(&[[2f64.ln(), 0.0]])).unwrap();
        assert!((s.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_row_sums_against_compensated_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Matrix::from_fn(5, 5, |_, _| rng.gen_range(-10.0..10.0));
        let s = softmax_rows(&m).unwrap();
        for r in 0..5 {
            // Kahan summation as an independent high-precision reference.
            let (mut sum, mut comp) = (0.0f64, 0.0f64);
            for &x in s.row(r) {
                let y = x - comp;
                let t = sum + y;
                comp = (t - sum) - y;
                sum = t;
            }
            assert!((sum - 1.0).abs() <= 1e-6);
            assert!(s.row(r).iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let m = Matrix::from_rows(&[[0.0, f64::NAN]]);
        assert!(matches!(softmax_rows(&m), Err(Error::NonFiniteLogits)));
        let m = Matrix::from_rows(&[[0.0, f64::INFINITY]]);
        assert!(matches!(softmax_rows(&m), Err(Error::NonFiniteLogits)));
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(
            minmax_normalize(&Vector(vec![2.0, 4.0, 6.0])).0,
            vec![0.0, 0.5, 1.0]
        );
        assert_eq!(
            minmax_normalize(&Vector(vec![5.0, 5.0, 5.0])).0,
            vec![0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn minmax_random_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let v = Vector((0..64).map(|_| rng.gen_range(-3.0..7.0)).collect());
        let n = minmax_normalize(&v);
        let mut sorted = v.0.clone();
        sorted.sort_by(f64::total_cmp);
        let (lo, hi) = (sorted[0], sorted[63]);
        let idx_max = v.0.iter().position(|&x| x == hi).unwrap();
        let idx_min = v.0.iter().position(|&x| x == lo).unwrap();
        assert_eq!(n.argmax(), Some(idx_max));
        assert_eq!(n.0[idx_max], 1.0);
        assert_eq!(n.0[idx_min], 0.0);
        assert!(n.0.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn ridge_inverse_examples() {
        let i3 = Matrix::identity(3);
        assert_eq!(ridge_inverse(&i3, 0.0).unwrap(), i3);
        let d = Matrix::from_rows(&[[2.0, 0.0], [0.0, 4.0]]);
        assert_eq!(
            ridge_inverse(&d, 0.0).unwrap(),
            Matrix::from_rows(&[[0.5, 0.0], [0.0, 0.25]])
        );
        let s = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]);
        let r = ridge_inverse(&s, 1e-3).unwrap();
        assert!(r.is_finite());
        let prod = s.add_ridge(1e-3).matmul(&r).unwrap();
        assert!(prod.max_abs_diff(&Matrix::identity(2)) <= 1e-4);
    }

    #[test]
    fn ridge_inverse_singular_and_non_square() {
        let s = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]);
        let err = ridge_inverse(&s, 0.0).unwrap_err();
        assert_eq!(
            err.to_string(),
            "singular textual attention matrix; increase epsilon"
        );
        assert!(ridge_inverse(&Matrix::zeros(2, 3), 0.0).is_err());
        assert!(ridge_inverse(&Matrix::identity(2), -1.0).is_err());
    }

    #[test]
    fn percentile_examples() {
        let v: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(percentile_threshold(&v, 80.0).unwrap(), 0.8);
        assert_eq!(percentile_threshold(&v, 0.0).unwrap(), 0.1);
        assert_eq!(percentile_threshold(&v, 100.0).unwrap(), 1.0);
        assert!(matches!(
            percentile_threshold(&v, 100.5),
            Err(Error::InvalidPercentile(_))
        ));
        assert!(percentile_threshold(&v, -1.0).is_err());
        assert!(percentile_threshold(&[], 50.0).is_err());
    }

    /// Brute-force nearest rank: smallest element x such that at least
    /// lambda% of the entries are <= x (with at least one entry counted).
    fn percentile_oracle(v: &[f64], lambda: f64) -> f64 {
        let n = v.len() as f64;
        let need = (lambda / 100.0 * n).max(1.0);
        let mut candidates = v.to_vec();
        candidates.sort_by(f64::total_cmp);
        for &c in &candidates {
            let count = v.iter().filter(|&&x| x <= c).count() as f64;
            if count + 1e-9 >= need {
                return c;
            }
        }
        unreachable!()
    }

    #[test]
    fn percentile_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000);
        for _ in 0..1000 {
            let len = rng.gen_range(1..40);
            let v: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for lambda in (0..=100).step_by(10) {
                let lambda = lambda as f64;
                assert_eq!(
                    percentile_threshold(&v, lambda).unwrap(),
                    percentile_oracle(&v, lambda)
                );
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_are_stochastic(
            vals in proptest::collection::vec(-300.0f64..300.0, 12),
        ) {
            let mut m = Matrix::new(3, 4, vals).unwrap();
            // Force a spread of at least 500 in the first row.
            m.set(0, 0, 260.0);
            m.set(0, 1, -260.0);
            let s = softmax_rows(&m).unwrap();
            for r in 0..3 {
                let sum: f64 = s.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6);
            }
        }

        #[test]
        fn minmax_is_idempotent(vals in proptest::collection::vec(-1e3f64..1e3, 2..50)) {
            let v = Vector(vals);
            let once = minmax_normalize(&v);
            let twice = minmax_normalize(&once);
            prop_assert_eq!(once, twice);
        }
    }

    #[test]
    fn ridge_inverse_residual_on_random_32x32() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..20 {
            let mut m = Matrix::from_fn(32, 32, |_, _| rng.gen_range(-1.0..1.0));
            for i in 0..32 {
                m.set(i, i, m.get(i, i) + 8.0);
            }
            let eps = 1e-6;
            let inv = ridge_inverse(&m, eps).unwrap();
            let prod = m.add_ridge(eps).matmul(&inv).unwrap();
            assert!(prod.max_abs_diff(&Matrix::identity(32)) <= 1e-4);
        }
    }
}
