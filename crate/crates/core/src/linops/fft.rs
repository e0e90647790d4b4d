//! Unitary 2-D discrete Fourier transforms on row-major complex planes.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::scalar::Real;

/// Planned unitary 2-D FFT (`1/sqrt(HW)` in both directions).
///
/// Frequencies use the unshifted layout: index `k` holds frequency `k` for
/// `k < n/2` and `k - n` otherwise.
#[derive(Clone)]
pub struct Fft2<T: Real> {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
    scale: T,
}

impl<T: Real> fmt::Debug for Fft2<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fft2")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish()
    }
}

impl<T: Real> Fft2<T> {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
            scale: T::one() / T::from_usize_lossy(height * width).sqrt(),
        }
    }

    pub fn forward(&self, plane: &mut [Complex<T>]) {
        self.run(plane, &self.row_fwd, &self.col_fwd);
    }

    pub fn inverse(&self, plane: &mut [Complex<T>]) {
        self.run(plane, &self.row_inv, &self.col_inv);
    }

    fn run(&self, plane: &mut [Complex<T>], rows: &Arc<dyn Fft<T>>, cols: &Arc<dyn Fft<T>>) {
        let (h, w) = (self.height, self.width);
        assert_eq!(plane.len(), h * w, "fft plane size");
        rows.process(plane);
        let mut col = vec![Complex::new(T::zero(), T::zero()); h];
        for j in 0..w {
            for i in 0..h {
                col[i] = plane[i * w + j];
            }
            cols.process(&mut col);
            for i in 0..h {
                plane[i * w + j] = col[i] * self.scale;
            }
        }
    }
}

/// Signed frequency of index `k` in an unshifted length-`n` transform.
pub fn signed_freq(k: usize, n: usize) -> isize {
    if k < n.div_ceil(2) {
        k as isize
    } else {
        k as isize - n as isize
    }
}
