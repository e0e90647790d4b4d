//! Parallel-beam CT: pixel-driven projector, matched backprojector and
//! filtered backprojection.
//!
//! Pixel `(i, j)` of an `n x n` image sits at `x = j - (n-1)/2`,
//! `y = (n-1)/2 - i` in pixel units. For angle `θ` its detector coordinate
//! is `t = x cos θ + y sin θ`, shifted so the detector centre is at
//! `(n_det-1)/2`; the pixel value is split between the two nearest bins by
//! linear interpolation. The backprojector gathers with the same weights, so
//! the pair is an exact transpose.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::LinearModel;
use crate::error::{Error, Result};
use crate::image::{Image, ImageShape};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram<T> {
    pub n_angles: usize,
    pub n_detectors: usize,
    /// Row-major `n_angles x n_detectors`.
    pub data: Vec<T>,
}

impl<T: Real> Sinogram<T> {
    pub fn zeros(n_angles: usize, n_detectors: usize) -> Self {
        Self {
            n_angles,
            n_detectors,
            data: vec![T::zero(); n_angles * n_detectors],
        }
    }

    pub fn from_vec(n_angles: usize, n_detectors: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n_angles * n_detectors {
            return Err(Error::shape(format!(
                "sinogram buffer has {} values, expected {}x{}",
                data.len(),
                n_angles,
                n_detectors
            )));
        }
        Ok(Self {
            n_angles,
            n_detectors,
            data,
        })
    }

    pub fn row(&self, a: usize) -> &[T] {
        &self.data[a * self.n_detectors..(a + 1) * self.n_detectors]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FbpFilter {
    #[default]
    RamLak,
    Hann,
}

/// Detector bins needed to cover the image diagonal (always odd).
pub fn default_detector_count(size: usize) -> usize {
    let half = ((size as f64) * std::f64::consts::SQRT_2 / 2.0).ceil() as usize + 1;
    2 * half + 1
}

/// `n` equispaced angles in degrees over `[0, 180)`.
pub fn uniform_angles(n: usize) -> Vec<f64> {
    (0..n).map(|k| 180.0 * k as f64 / n as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtGeometry {
    pub size: usize,
    pub angles_deg: Vec<f64>,
    pub n_detectors: usize,
}

impl CtGeometry {
    pub fn new(size: usize, angles_deg: Vec<f64>) -> Result<Self> {
        Self::with_detectors(size, angles_deg, default_detector_count(size))
    }

    pub fn with_detectors(size: usize, angles_deg: Vec<f64>, n_detectors: usize) -> Result<Self> {
        validate_angles(&angles_deg)?;
        if size < 8 {
            return Err(Error::shape(format!("CT image size {size} is below 8")));
        }
        if n_detectors == 0 {
            return Err(Error::config("n_detectors", "must be positive"));
        }
        Ok(Self {
            size,
            angles_deg,
            n_detectors,
        })
    }

    pub fn n_angles(&self) -> usize {
        self.angles_deg.len()
    }
}

fn validate_angles(angles: &[f64]) -> Result<()> {
    if angles.is_empty() {
        return Err(Error::config("angles", "angle list is empty"));
    }
    for (k, &a) in angles.iter().enumerate() {
        if !(0.0..180.0).contains(&a) || !a.is_finite() {
            return Err(Error::config("angles", format!("angle {a} outside [0, 180)")));
        }
        if k > 0 && a <= angles[k - 1] {
            return Err(Error::config("angles", "angles must be strictly increasing"));
        }
    }
    Ok(())
}

/// Ramp filter applied to each projection via zero-padded FFT.
///
/// The circular kernel is real and even, so the filter matrix is symmetric
/// and serves as its own transpose.
#[derive(Clone)]
struct RampFilter<T: Real> {
    n_detectors: usize,
    response: Vec<T>,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
}

impl<T: Real> RampFilter<T> {
    fn new(n_detectors: usize, kind: FbpFilter) -> Self {
        let pad = (2 * n_detectors).next_power_of_two().max(64);
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(pad);
        let inv = planner.plan_fft_inverse(pad);

        // Ram-Lak kernel sampled at unit detector spacing.
        let mut kernel = vec![Complex::new(0.0f64, 0.0); pad];
        kernel[0].re = 0.25;
        for n in (1..pad / 2).step_by(2) {
            let v = -1.0 / (std::f64::consts::PI * n as f64).powi(2);
            kernel[n].re = v;
            kernel[pad - n].re = v;
        }
        let mut planner64 = FftPlanner::<f64>::new();
        planner64.plan_fft_forward(pad).process(&mut kernel);
        let response = kernel
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let apod = match kind {
                    FbpFilter::RamLak => 1.0,
                    FbpFilter::Hann => {
                        let f = super::fft::signed_freq(k, pad) as f64 / pad as f64;
                        0.5 * (1.0 + (2.0 * std::f64::consts::PI * f).cos())
                    }
                };
                // Fold in the 1/pad of the unnormalized inverse transform.
                T::lit(c.re * apod / pad as f64)
            })
            .collect();
        Self {
            n_detectors,
            response,
            fwd,
            inv,
        }
    }

    fn apply_row(&self, row: &[T], out: &mut [T]) {
        let pad = self.response.len();
        let mut buf = vec![Complex::new(T::zero(), T::zero()); pad];
        for (b, &v) in buf.iter_mut().zip(row) {
            b.re = v;
        }
        self.fwd.process(&mut buf);
        for (b, &r) in buf.iter_mut().zip(&self.response) {
            *b = *b * r;
        }
        self.inv.process(&mut buf);
        for (o, b) in out.iter_mut().zip(&buf[..self.n_detectors]) {
            *o = b.re;
        }
    }
}

/// CT measurement model over a fixed angle list.
#[derive(Clone)]
pub struct CtModel<T: Real> {
    geometry: CtGeometry,
    filter_kind: FbpFilter,
    cos: Vec<T>,
    sin: Vec<T>,
    filter: Arc<RampFilter<T>>,
}

impl<T: Real> fmt::Debug for CtModel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CtModel")
            .field("geometry", &self.geometry)
            .field("filter", &self.filter_kind)
            .finish()
    }
}

impl<T: Real> CtModel<T> {
    pub fn new(geometry: CtGeometry, filter_kind: FbpFilter) -> Self {
        let filter = Arc::new(RampFilter::new(geometry.n_detectors, filter_kind));
        Self::with_filter(geometry, filter_kind, filter)
    }

    fn with_filter(geometry: CtGeometry, filter_kind: FbpFilter, filter: Arc<RampFilter<T>>) -> Self {
        let (cos, sin) = geometry
            .angles_deg
            .iter()
            .map(|a| {
                let r = a.to_radians();
                (T::lit(r.cos()), T::lit(r.sin()))
            })
            .unzip();
        Self {
            geometry,
            filter_kind,
            cos,
            sin,
            filter,
        }
    }

    /// Convenience constructor with `n_angles` equispaced views.
    pub fn uniform(size: usize, n_angles: usize, filter_kind: FbpFilter) -> Result<Self> {
        Ok(Self::new(CtGeometry::new(size, uniform_angles(n_angles))?, filter_kind))
    }

    pub fn geometry(&self) -> &CtGeometry {
        &self.geometry
    }

    pub fn filter_kind(&self) -> FbpFilter {
        self.filter_kind
    }

    pub fn n_angles(&self) -> usize {
        self.geometry.n_angles()
    }

    pub fn n_detectors(&self) -> usize {
        self.geometry.n_detectors
    }

    /// Model restricted to the given angle indices (kept in the given order,
    /// which must be increasing). The FBP normalization follows the subset's
    /// own angle count.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::config("batch", "empty angle subset"));
        }
        let angles = indices
            .iter()
            .map(|&k| {
                self.geometry
                    .angles_deg
                    .get(k)
                    .copied()
                    .ok_or_else(|| Error::shape(format!("angle index {k} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        let geometry = CtGeometry::with_detectors(self.geometry.size, angles, self.geometry.n_detectors)?;
        Ok(Self::with_filter(geometry, self.filter_kind, self.filter.clone()))
    }

    fn shape(&self) -> ImageShape {
        ImageShape::new(1, self.geometry.size, self.geometry.size)
    }

    #[inline]
    fn centre(&self) -> (T, T) {
        let c = T::lit((self.geometry.size as f64 - 1.0) / 2.0);
        let d = T::lit((self.geometry.n_detectors as f64 - 1.0) / 2.0);
        (c, d)
    }

    /// Raw projection `A x` into a flat `n_angles x n_detectors` buffer.
    pub fn project(&self, x: &Image<T>) -> Vec<T> {
        assert_eq!(x.shape(), self.shape(), "CT projector image shape");
        let n = self.geometry.size;
        let nd = self.geometry.n_detectors;
        let (c, dc) = self.centre();
        let img = x.data();
        let mut out = vec![T::zero(); self.n_angles() * nd];
        out.par_chunks_mut(nd).enumerate().for_each(|(a, row)| {
            let (ct, st) = (self.cos[a], self.sin[a]);
            for i in 0..n {
                let y = c - T::from_usize_lossy(i);
                let base = y * st - c * ct + dc;
                let line = &img[i * n..(i + 1) * n];
                for (j, &v) in line.iter().enumerate() {
                    if v == T::zero() {
                        continue;
                    }
                    let u = base + T::from_usize_lossy(j) * ct;
                    let k = u.floor();
                    let f = u - k;
                    let k = k.to_isize().unwrap_or(-2);
                    if k >= 0 && (k as usize) < nd {
                        row[k as usize] += v * (T::one() - f);
                    }
                    if k + 1 >= 0 && ((k + 1) as usize) < nd {
                        row[(k + 1) as usize] += v * f;
                    }
                }
            }
        });
        out
    }

    /// Unfiltered backprojection `Aᵀ y`.
    pub fn backproject(&self, y: &[T]) -> Image<T> {
        let n = self.geometry.size;
        let nd = self.geometry.n_detectors;
        assert_eq!(y.len(), self.n_angles() * nd, "CT backprojector sinogram length");
        let (c, dc) = self.centre();
        let mut out = Image::zeros(self.shape());
        out.data_mut().par_chunks_mut(n).enumerate().for_each(|(i, line)| {
            let yy = c - T::from_usize_lossy(i);
            for a in 0..self.n_angles() {
                let (ct, st) = (self.cos[a], self.sin[a]);
                let base = yy * st - c * ct + dc;
                let row = &y[a * nd..(a + 1) * nd];
                for (j, px) in line.iter_mut().enumerate() {
                    let u = base + T::from_usize_lossy(j) * ct;
                    let k = u.floor();
                    let f = u - k;
                    let k = k.to_isize().unwrap_or(-2);
                    let mut acc = T::zero();
                    if k >= 0 && (k as usize) < nd {
                        acc += row[k as usize] * (T::one() - f);
                    }
                    if k + 1 >= 0 && ((k + 1) as usize) < nd {
                        acc += row[(k + 1) as usize] * f;
                    }
                    *px += acc;
                }
            }
        });
        out
    }

    /// Ramp-filters every projection row.
    pub fn filter_rows(&self, y: &[T]) -> Vec<T> {
        let nd = self.geometry.n_detectors;
        let mut out = vec![T::zero(); y.len()];
        out.par_chunks_mut(nd)
            .zip(y.par_chunks(nd))
            .for_each(|(o, r)| self.filter.apply_row(r, o));
        out
    }

    fn fbp_scale(&self) -> T {
        T::lit(std::f64::consts::PI / self.n_angles() as f64)
    }
}

impl<T: Real> LinearModel<T> for CtModel<T> {
    fn image_shape(&self) -> ImageShape {
        self.shape()
    }

    fn measurement_len(&self) -> usize {
        self.n_angles() * self.geometry.n_detectors
    }

    fn forward(&self, x: &Image<T>) -> Vec<T> {
        self.project(x)
    }

    fn adjoint(&self, y: &[T]) -> Image<T> {
        self.backproject(y)
    }

    fn pinv(&self, y: &[T]) -> Image<T> {
        let mut img = self.backproject(&self.filter_rows(y));
        img.scale(self.fbp_scale());
        img
    }

    fn pinv_adjoint(&self, x: &Image<T>) -> Vec<T> {
        let mut s = self.filter_rows(&self.project(x));
        let k = self.fbp_scale();
        s.iter_mut().for_each(|v| *v *= k);
        s
    }
}

/// Radon transform of a square single-channel image at the given angles.
pub fn ct_forward<T: Real>(image: &Image<T>, angles_deg: &[f64]) -> Result<Sinogram<T>> {
    let shape = image.shape();
    shape.check_grid()?;
    if shape.height != shape.width {
        return Err(Error::shape(format!(
            "CT image must be square, got {}x{}",
            shape.height, shape.width
        )));
    }
    if shape.channels != 1 {
        return Err(Error::shape("CT image must have a single channel"));
    }
    let model = CtModel::new(CtGeometry::new(shape.height, angles_deg.to_vec())?, FbpFilter::RamLak);
    let n_det = model.n_detectors();
    Sinogram::from_vec(angles_deg.len(), n_det, model.project(image))
}

/// Filtered backprojection onto an `out_size x out_size` grid.
pub fn ct_fbp<T: Real>(sino: &Sinogram<T>, angles_deg: &[f64], out_size: usize, filter: FbpFilter) -> Result<Image<T>> {
    if sino.n_angles != angles_deg.len() {
        return Err(Error::shape(format!(
            "sinogram has {} angles but {} were given",
            sino.n_angles,
            angles_deg.len()
        )));
    }
    let geometry = CtGeometry::with_detectors(out_size, angles_deg.to_vec(), sino.n_detectors)?;
    Ok(CtModel::new(geometry, filter).pinv(&sino.data))
}
