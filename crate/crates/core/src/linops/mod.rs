//! Matrix-free measurement operators.
//!
//! Every operator maps an [`Image`] to a flat real measurement vector.
//! Complex measurements are stored with interleaved real/imaginary parts,
//! so adjoints are taken with respect to the real inner product, which for
//! complex-linear maps coincides with the Hermitian adjoint.

pub mod ct;
pub mod fft;
pub mod mri;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::image::{dot, norm_sq, Image, ImageShape};
use crate::scalar::Real;

pub use ct::{ct_fbp, ct_forward, CtGeometry, CtModel, FbpFilter, Sinogram};
pub use mri::{mri_forward, mri_pinv, CoilMaps, KSpaceStack, MriModel, SamplingMask};

/// A linear measurement model `A` together with its adjoint and a stable
/// pseudo-inverse `A†`.
pub trait LinearModel<T: Real>: Send + Sync {
    fn image_shape(&self) -> ImageShape;

    fn measurement_len(&self) -> usize;

    /// `A x`
    fn forward(&self, x: &Image<T>) -> Vec<T>;

    /// `Aᵀ y`
    fn adjoint(&self, y: &[T]) -> Image<T>;

    /// `A† y`
    fn pinv(&self, y: &[T]) -> Image<T>;

    /// `(A†)ᵀ x`, used to back-propagate through the pseudo-inverse.
    fn pinv_adjoint(&self, x: &Image<T>) -> Vec<T>;

    /// `A† A x`
    fn project(&self, x: &Image<T>) -> Image<T> {
        self.pinv(&self.forward(x))
    }

    /// `Aᵀ (A†)ᵀ g`, the transpose of [`LinearModel::project`].
    fn project_adjoint(&self, g: &Image<T>) -> Image<T> {
        self.adjoint(&self.pinv_adjoint(g))
    }
}

impl<T: Real, M: LinearModel<T> + ?Sized> LinearModel<T> for Box<M> {
    fn image_shape(&self) -> ImageShape {
        (**self).image_shape()
    }
    fn measurement_len(&self) -> usize {
        (**self).measurement_len()
    }
    fn forward(&self, x: &Image<T>) -> Vec<T> {
        (**self).forward(x)
    }
    fn adjoint(&self, y: &[T]) -> Image<T> {
        (**self).adjoint(y)
    }
    fn pinv(&self, y: &[T]) -> Image<T> {
        (**self).pinv(y)
    }
    fn pinv_adjoint(&self, x: &Image<T>) -> Vec<T> {
        (**self).pinv_adjoint(x)
    }
}

/// Measurement model for either supported modality.
#[derive(Clone)]
pub enum MeasurementModel<T: Real> {
    Ct(CtModel<T>),
    Mri(MriModel<T>),
}

impl<T: Real> MeasurementModel<T> {
    fn inner(&self) -> &dyn LinearModel<T> {
        match self {
            MeasurementModel::Ct(m) => m,
            MeasurementModel::Mri(m) => m,
        }
    }
}

impl<T: Real> LinearModel<T> for MeasurementModel<T> {
    fn image_shape(&self) -> ImageShape {
        self.inner().image_shape()
    }
    fn measurement_len(&self) -> usize {
        self.inner().measurement_len()
    }
    fn forward(&self, x: &Image<T>) -> Vec<T> {
        self.inner().forward(x)
    }
    fn adjoint(&self, y: &[T]) -> Image<T> {
        self.inner().adjoint(y)
    }
    fn pinv(&self, y: &[T]) -> Image<T> {
        self.inner().pinv(y)
    }
    fn pinv_adjoint(&self, x: &Image<T>) -> Vec<T> {
        self.inner().pinv_adjoint(x)
    }
}

/// `A = I` on a fixed image shape.
#[derive(Clone, Copy, Debug)]
pub struct IdentityModel {
    pub shape: ImageShape,
}

impl<T: Real> LinearModel<T> for IdentityModel {
    fn image_shape(&self) -> ImageShape {
        self.shape
    }
    fn measurement_len(&self) -> usize {
        self.shape.len()
    }
    fn forward(&self, x: &Image<T>) -> Vec<T> {
        x.data().to_vec()
    }
    fn adjoint(&self, y: &[T]) -> Image<T> {
        Image::from_vec(self.shape, y.to_vec()).expect("identity measurement length")
    }
    fn pinv(&self, y: &[T]) -> Image<T> {
        <Self as LinearModel<T>>::adjoint(self, y)
    }
    fn pinv_adjoint(&self, x: &Image<T>) -> Vec<T> {
        x.data().to_vec()
    }
}

/// Dense `n x d` matrix acting on a single-channel image flattened row-major.
#[derive(Clone, Debug)]
pub struct DenseModel<T> {
    pub shape: ImageShape,
    pub rows: usize,
    /// Row-major `rows x shape.len()`.
    pub matrix: Vec<T>,
}

impl<T: Real> LinearModel<T> for DenseModel<T> {
    fn image_shape(&self) -> ImageShape {
        self.shape
    }
    fn measurement_len(&self) -> usize {
        self.rows
    }
    fn forward(&self, x: &Image<T>) -> Vec<T> {
        let d = self.shape.len();
        (0..self.rows)
            .map(|r| dot(&self.matrix[r * d..(r + 1) * d], x.data()))
            .collect()
    }
    fn adjoint(&self, y: &[T]) -> Image<T> {
        let d = self.shape.len();
        let mut out = vec![T::zero(); d];
        for (r, &yr) in y.iter().enumerate() {
            crate::image::axpy(&mut out, yr, &self.matrix[r * d..(r + 1) * d]);
        }
        Image::from_vec(self.shape, out).expect("dense adjoint length")
    }
    fn pinv(&self, y: &[T]) -> Image<T> {
        self.adjoint(y)
    }
    fn pinv_adjoint(&self, x: &Image<T>) -> Vec<T> {
        self.forward(x)
    }
}

/// Maximum relative adjointness defect
/// `|<A x, y> - <x, Aᵀ y>| / (|A x| |y|)` over `trials` Gaussian pairs.
pub fn adjoint_test<T: Real, M: LinearModel<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    trials: usize,
    rng: &mut R,
) -> f64 {
    let shape = model.image_shape();
    let mut worst = 0.0f64;
    for _ in 0..trials.max(1) {
        let x = Image::from_fn(shape, |_, _, _| T::lit(rng.sample::<f64, _>(StandardNormal)));
        let y: Vec<T> = (0..model.measurement_len())
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let ax = model.forward(&x);
        let aty = model.adjoint(&y);
        let lhs = dot(&ax, &y).as_f64();
        let rhs = x.dot(&aty).as_f64();
        let denom = norm_sq(&ax).as_f64().sqrt() * norm_sq(&y).as_f64().sqrt();
        let defect = if denom > 0.0 {
            (lhs - rhs).abs() / denom
        } else {
            (lhs - rhs).abs()
        };
        worst = worst.max(defect);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Negative control: a "model" whose adjoint is the transpose taken along
    /// the wrong axis.
    struct TransposedAdjoint(DenseModel<f64>);

    impl LinearModel<f64> for TransposedAdjoint {
        fn image_shape(&self) -> ImageShape {
            self.0.shape
        }
        fn measurement_len(&self) -> usize {
            self.0.rows
        }
        fn forward(&self, x: &Image<f64>) -> Vec<f64> {
            self.0.forward(x)
        }
        fn adjoint(&self, y: &[f64]) -> Image<f64> {
            // Uses A instead of Aᵀ (square matrix), which is wrong unless A is symmetric.
            let x = Image::from_vec(self.0.shape, y.to_vec()).unwrap();
            Image::from_vec(self.0.shape, self.0.forward(&x)).unwrap()
        }
        fn pinv(&self, y: &[f64]) -> Image<f64> {
            self.adjoint(y)
        }
        fn pinv_adjoint(&self, x: &Image<f64>) -> Vec<f64> {
            self.forward(x)
        }
    }

    #[test]
    fn dense_adjoint_is_exact_and_negative_control_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = ImageShape::new(1, 4, 4);
        let d = shape.len();
        let matrix: Vec<f64> = (0..d * d).map(|_| rng.random::<f64>() - 0.5).collect();
        let dense = DenseModel { shape, rows: d, matrix };
        assert!(adjoint_test(&dense, 10, &mut rng) < 1e-12);
        let bad = TransposedAdjoint(dense);
        assert!(adjoint_test(&bad, 10, &mut rng) >= 0.1);
    }

    #[test]
    fn identity_model_round_trips() {
        let shape = ImageShape::new(1, 8, 8);
        let m = IdentityModel { shape };
        let x = Image::<f32>::from_fn(shape, |_, i, j| (i * 8 + j) as f32);
        assert_eq!(LinearModel::<f32>::project(&m, &x), x);
    }
}
