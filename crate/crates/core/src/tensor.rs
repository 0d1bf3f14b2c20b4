//! Dense row-major `f64` matrices and the seeded generator used everywhere
//! for weights, batches and test inputs.

use std::fmt;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Row-major dense matrix. `data.len() == rows * cols` always holds.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::config(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Matrix::new",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
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

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    /// Panics on ragged input; intended for literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows[0].as_ref().len();
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

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        gemm(self, false, other, false, "matmul")
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        gemm(self, false, other, true, "matmul_nt")
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        gemm(self, true, other, false, "matmul_tn")
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|x| c * x)
    }

    pub fn scale_in_place(&mut self, c: f64) {
        self.data.iter_mut().for_each(|x| *x *= c);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        self.check_same_shape(other, op)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::numerical(op, "non-finite entry"))
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    /// Frobenius norm of `self - other`.
    pub fn frobenius_distance(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other, "frobenius_distance")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect()
    }

    pub fn col_norms(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, x) in sums.iter_mut().zip(self.row(i)) {
                *s += x * x;
            }
        }
        sums.into_iter().map(f64::sqrt).collect()
    }
}

fn gemm(a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool, op: &'static str) -> Result<Matrix> {
    let (m, k) = if trans_a {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (kb, n) = if trans_b {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    if k != kb {
        return Err(Error::Shape {
            op,
            left: (m, k),
            right: (kb, n),
        });
    }
    // Logical strides of the (possibly transposed) row-major operands.
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    let mut out = Matrix::zeros(m, n);
    unsafe {
        // SAFETY: the strides above describe exactly the m×k and k×n views
        // of the owned buffers, and `out` is a fresh m×n row-major buffer.
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(out)
}

/// Deterministic counter-based generator: ChaCha8 keyed by `seed`, with an
/// independent stream per `stream` index.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A fresh generator on another stream of the same seed.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::with_stream(self.seed, stream)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// i.i.d. standard normal entries.
    pub fn gaussian_matrix(&mut self, m: usize, n: usize) -> Matrix {
        let data = (0..m * n).map(|_| self.normal()).collect();
        Matrix {
            rows: m,
            cols: n,
            data,
        }
    }

    /// `m × k` matrix with orthonormal columns (`k ≤ m`), from modified
    /// Gram-Schmidt on a Gaussian draw.
    pub fn orthonormal_columns(&mut self, m: usize, k: usize) -> Matrix {
        assert!(k <= m, "need k <= m for orthonormal columns");
        loop {
            let g = self.gaussian_matrix(m, k);
            if let Some(q) = gram_schmidt_columns(&g) {
                return q;
            }
        }
    }

    /// `U · diag(sigma) · Vᵀ` with Haar-like random `U` (m×k) and `V` (n×k),
    /// `k = sigma.len() = min(m, n)`.
    pub fn matrix_with_spectrum(&mut self, m: usize, n: usize, sigma: &[f64]) -> Matrix {
        let k = m.min(n);
        assert_eq!(sigma.len(), k, "spectrum length must be min(m, n)");
        let u = self.orthonormal_columns(m, k);
        let v = self.orthonormal_columns(n, k);
        let mut us = u;
        for i in 0..m {
            for (x, s) in us.row_mut(i).iter_mut().zip(sigma) {
                *x *= s;
            }
        }
        us.matmul_nt(&v).expect("conformable by construction")
    }

    /// Random `m × n` matrix whose singular values lie in `[min_ratio, 1]`,
    /// with both endpoints attained.
    pub fn well_conditioned(&mut self, m: usize, n: usize, min_ratio: f64) -> Matrix {
        let k = m.min(n);
        let mut sigma: Vec<f64> = (0..k).map(|_| self.uniform_range(min_ratio, 1.0)).collect();
        sigma[0] = 1.0;
        if k > 1 {
            sigma[k - 1] = min_ratio;
        }
        self.matrix_with_spectrum(m, n, &sigma)
    }
}

/// Orthonormalizes the columns of `a`; `None` if they are numerically dependent.
fn gram_schmidt_columns(a: &Matrix) -> Option<Matrix> {
    let (m, k) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| a.column(j)).collect();
    for j in 0..k {
        for _pass in 0..2 {
            for p in 0..j {
                let dot: f64 = cols[j].iter().zip(&cols[p]).map(|(x, y)| x * y).sum();
                let (head, tail) = cols.split_at_mut(j);
                for (x, y) in tail[0].iter_mut().zip(&head[p]) {
                    *x -= dot * y;
                }
            }
        }
        let norm = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-10 {
            return None;
        }
        cols[j].iter_mut().for_each(|x| *x /= norm);
    }
    Some(Matrix::from_fn(m, k, |i, j| cols[j][i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            let mut acc = 0.0;
            for p in 0..a.cols() {
                acc += a.get(i, p) * b.get(p, j);
            }
            acc
        })
    }

    #[test]
    fn matmul_identity_cases() {
        let i2 = Matrix::identity(2);
        assert_eq!(i2.matmul(&i2).unwrap(), i2);
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(a.matmul(&i2).unwrap(), a);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(3);
        let a = rng.gaussian_matrix(3, 4);
        let b = rng.gaussian_matrix(4, 2);
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-14);
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let mut rng = Rng::new(4);
        let a = rng.gaussian_matrix(5, 3);
        let b = rng.gaussian_matrix(7, 3);
        let c = rng.gaussian_matrix(5, 2);
        let nt = a.matmul_nt(&b).unwrap();
        assert!(nt.max_abs_diff(&naive_matmul(&a, &b.transpose())).unwrap() < 1e-14);
        let tn = a.matmul_tn(&c).unwrap();
        assert!(tn.max_abs_diff(&naive_matmul(&a.transpose(), &c)).unwrap() < 1e-14);
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        let err = a.matmul(&Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "matmul", .. }));
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn transpose_cases() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(a.transpose(), Matrix::from_rows(&[[1.0, 3.0], [2.0, 4.0]]));
        assert_eq!(Matrix::identity(3).transpose(), Matrix::identity(3));
        let r = Rng::new(9).gaussian_matrix(5, 7);
        assert_eq!(r.transpose().transpose(), r);
    }

    #[test]
    fn frobenius_cases() {
        assert_eq!(Matrix::zeros(2, 2).frobenius_norm(), 0.0);
        assert_eq!(Matrix::identity(3).frobenius_norm(), 3f64.sqrt());
        assert_eq!(Matrix::from_rows(&[[3.0, 4.0]]).frobenius_norm(), 5.0);
    }

    #[test]
    fn gaussian_is_deterministic_per_seed() {
        let a = Rng::new(0).gaussian_matrix(4, 4);
        let b = Rng::new(0).gaussian_matrix(4, 4);
        assert_eq!(a, b);
        let c = Rng::with_stream(0, 1).gaussian_matrix(4, 4);
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_moments() {
        let n = 100_000;
        let m = Rng::new(11).gaussian_matrix(1, n);
        let mean = m.data().iter().sum::<f64>() / n as f64;
        let var = m
            .data()
            .iter()
            .map(|x| (x - mean) * (x - mean))
            .sum::<f64>()
            / (n - 1) as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((0.97..=1.03).contains(&var), "var {var}");
    }

    #[test]
    fn orthonormal_columns_are_orthonormal() {
        let q = Rng::new(5).orthonormal_columns(9, 4);
        let gram = q.matmul_tn(&q).unwrap();
        assert!(gram.max_abs_diff(&Matrix::identity(4)).unwrap() < 1e-12);
    }

    mod props {
        use crate::tensor::Rng;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn matmul_is_associative(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, l in 1usize..6, n in 1usize..6) {
                let mut rng = Rng::new(seed);
                let a = rng.gaussian_matrix(m, k);
                let b = rng.gaussian_matrix(k, l);
                let c = rng.gaussian_matrix(l, n);
                let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
                let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
                let rel = left.frobenius_distance(&right).unwrap() / left.frobenius_norm().max(1e-300);
                prop_assert!(rel <= 1e-9);
            }

            #[test]
            fn frobenius_is_absolutely_homogeneous(seed in any::<u64>(), c in -1e3f64..1e3) {
                let a = Rng::new(seed).gaussian_matrix(4, 5);
                let lhs = a.scale(c).frobenius_norm();
                let rhs = c.abs() * a.frobenius_norm();
                prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1e-300));
            }

            #[test]
            fn equal_seeds_give_identical_streams(seed in any::<u64>(), stream in 0u64..8) {
                let mut a = Rng::with_stream(seed, stream);
                let mut b = Rng::with_stream(seed, stream);
                for _ in 0..32 {
                    prop_assert_eq!(a.next_u64(), b.next_u64());
                    prop_assert_eq!(a.normal().to_bits(), b.normal().to_bits());
                }
            }
        }
    }
}
