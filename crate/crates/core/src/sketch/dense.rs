//! Small dense matrices and random dense sketches.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::image::dot;
use crate::scalar::Real;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions");
        let mut out = Self::zeros(self.rows, other.cols);
        T::gemm(
            self.rows,
            self.cols,
            other.cols,
            T::one(),
            &self.data,
            self.cols as isize,
            1,
            &other.data,
            other.cols as isize,
            1,
            T::zero(),
            &mut out.data,
            other.cols as isize,
            1,
        );
        out
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `selfᵀ y`
    pub fn tr_matvec(&self, y: &[T]) -> Vec<T> {
        assert_eq!(y.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for (i, &yi) in y.iter().enumerate() {
            crate::image::axpy(&mut out, yi, self.row(i));
        }
        out
    }

    pub fn frobenius(&self) -> T {
        dot(&self.data, &self.data).sqrt()
    }
}

/// `m x n` sketch with i.i.d. `Normal(0, 1/m)` entries, so `E[SᵀS] = I`.
pub fn make_gaussian_sketch<T: Real, R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> Matrix<T> {
    let normal = Normal::new(0.0, 1.0 / (m as f64).sqrt()).expect("valid normal");
    Matrix::from_fn(m, n, |_, _| T::lit(normal.sample(rng)))
}

/// `m x n` sketch with i.i.d. `±1/sqrt(m)` entries.
pub fn make_rademacher_sketch<T: Real, R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> Matrix<T> {
    let s = 1.0 / (m as f64).sqrt();
    Matrix::from_fn(m, n, |_, _| T::lit(if rng.random::<bool>() { s } else { -s }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gaussian_sketch_is_isotropic_in_expectation() {
        let (m, n, samples) = (16, 8, 10_000);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut acc = Matrix::<f64>::zeros(n, n);
        for _ in 0..samples {
            let s = make_gaussian_sketch::<f64, _>(m, n, &mut rng);
            let sts = s.transpose().matmul(&s);
            for (a, b) in acc.data.iter_mut().zip(&sts.data) {
                *a += b / samples as f64;
            }
        }
        let mut off = 0.0;
        for i in 0..n {
            assert!((0.95..=1.05).contains(&acc.get(i, i)), "diag {}", acc.get(i, i));
            for j in 0..n {
                if i != j {
                    off += acc.get(i, j).abs();
                }
            }
        }
        assert!(off / (n * n - n) as f64 <= 0.05);
    }

    #[test]
    fn scalar_gaussian_has_unit_variance_and_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws: Vec<f64> = (0..20_000)
            .map(|_| make_gaussian_sketch::<f64, _>(1, 1, &mut rng).data[0])
            .collect();
        let var = draws.iter().map(|v| v * v).sum::<f64>() / draws.len() as f64;
        assert!((var - 1.0).abs() < 0.05);
        let a = make_gaussian_sketch::<f32, _>(3, 4, &mut ChaCha8Rng::seed_from_u64(7));
        let b = make_gaussian_sketch::<f32, _>(3, 4, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }

    #[test]
    fn matmul_and_transpose_agree() {
        let a = Matrix::<f64>::from_fn(3, 4, |i, j| (i * 4 + j) as f64);
        let x = vec![1.0, -1.0, 2.0, 0.5];
        let ax = a.matvec(&x);
        let xm = Matrix::from_fn(4, 1, |i, _| x[i]);
        let axm = a.matmul(&xm);
        for i in 0..3 {
            assert!((ax[i] - axm.get(i, 0)).abs() < 1e-12);
        }
        let y = vec![0.3, 0.1, -2.0];
        let aty = a.tr_matvec(&y);
        let at = a.transpose().matvec(&y);
        assert_eq!(aty, at);
    }
}
