//! Cartesian multi-coil MRI: `k_i = M ∘ F(C_i x)`.
//!
//! Images carry two channels (real, imaginary). K-space is stored per coil
//! as a row-major complex plane in the unshifted FFT layout and flattened
//! with interleaved real/imaginary parts: `[coil][row][col][re, im]`.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex;
use rayon::prelude::*;

use super::fft::{signed_freq, Fft2};
use super::LinearModel;
use crate::error::{Error, Result};
use crate::image::{Image, ImageShape};
use crate::scalar::Real;

/// Binary Cartesian sampling pattern over the frequency grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplingMask {
    pub height: usize,
    pub width: usize,
    data: Vec<bool>,
}

impl SamplingMask {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("mask size does not match its grid"));
        }
        Ok(Self { height, width, data })
    }

    /// Keeps every `acceleration`-th phase-encode column plus a central
    /// autocalibration band of `acs_lines` columns.
    pub fn cartesian(height: usize, width: usize, acceleration: usize, acs_lines: usize) -> Result<Self> {
        if acceleration == 0 {
            return Err(Error::config("acceleration", "must be positive"));
        }
        let half = (acs_lines / 2) as isize;
        let lo = -half;
        let hi = acs_lines as isize - half;
        let keep: Vec<bool> = (0..width)
            .map(|j| {
                let f = signed_freq(j, width);
                (lo..hi).contains(&f) || f.rem_euclid(acceleration as isize) == 0
            })
            .collect();
        let data = (0..height * width).map(|k| keep[k % width]).collect();
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.width + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn sampled(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Columns that are fully sampled.
    pub fn sampled_columns(&self) -> Vec<usize> {
        (0..self.width)
            .filter(|&j| (0..self.height).all(|i| self.get(i, j)))
            .collect()
    }
}

/// Complex per-coil sensitivity maps on the image grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilMaps<T> {
    pub n_coils: usize,
    pub height: usize,
    pub width: usize,
    /// `n_coils` row-major planes.
    pub data: Vec<Complex<T>>,
}

impl<T: Real> CoilMaps<T> {
    pub fn new(n_coils: usize, height: usize, width: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if data.len() != n_coils * height * width {
            return Err(Error::shape("coil map buffer does not match its grid"));
        }
        if n_coils == 0 {
            return Err(Error::config("n_coils", "must be positive"));
        }
        Ok(Self {
            n_coils,
            height,
            width,
            data,
        })
    }

    pub fn ones(n_coils: usize, height: usize, width: usize) -> Self {
        Self {
            n_coils,
            height,
            width,
            data: vec![Complex::new(T::one(), T::zero()); n_coils * height * width],
        }
    }

    pub fn coil(&self, c: usize) -> &[Complex<T>] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    /// `Σ_i |C_i|²` per pixel.
    pub fn energy(&self) -> Vec<T> {
        let p = self.height * self.width;
        let mut e = vec![T::zero(); p];
        for c in 0..self.n_coils {
            for (acc, v) in e.iter_mut().zip(self.coil(c)) {
                *acc += v.norm_sqr();
            }
        }
        e
    }

    /// Keeps the listed coils, in order.
    pub fn select(&self, coils: &[usize]) -> Self {
        let mut data = Vec::with_capacity(coils.len() * self.height * self.width);
        for &c in coils {
            data.extend_from_slice(self.coil(c));
        }
        Self {
            n_coils: coils.len(),
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Coil-space linear combination: output coil `r` is
    /// `Σ_c weights[r][c] · C_c`, with `weights` row-major `rows x n_coils`.
    pub fn combine(&self, rows: usize, weights: &[Complex<T>]) -> Self {
        assert_eq!(weights.len(), rows * self.n_coils);
        let p = self.height * self.width;
        let mut data = vec![Complex::new(T::zero(), T::zero()); rows * p];
        for r in 0..rows {
            let out = &mut data[r * p..(r + 1) * p];
            for c in 0..self.n_coils {
                let w = weights[r * self.n_coils + c];
                if w == Complex::new(T::zero(), T::zero()) {
                    continue;
                }
                for (o, v) in out.iter_mut().zip(self.coil(c)) {
                    *o += w * v;
                }
            }
        }
        Self {
            n_coils: rows,
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Masked multi-coil k-space with its sampling pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceStack<T> {
    pub n_coils: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<Complex<T>>,
    pub mask: SamplingMask,
}

impl<T: Real> KSpaceStack<T> {
    /// Builds a stack, zeroing every entry the mask excludes.
    pub fn new(n_coils: usize, mask: SamplingMask, mut data: Vec<Complex<T>>) -> Result<Self> {
        let p = mask.height * mask.width;
        if data.len() != n_coils * p {
            return Err(Error::shape(format!(
                "k-space buffer has {} samples, expected {} coils x {}",
                data.len(),
                n_coils,
                p
            )));
        }
        for c in 0..n_coils {
            for (v, &m) in data[c * p..(c + 1) * p].iter_mut().zip(mask.as_slice()) {
                if !m {
                    *v = Complex::new(T::zero(), T::zero());
                }
            }
        }
        Ok(Self {
            n_coils,
            height: mask.height,
            width: mask.width,
            data,
            mask,
        })
    }

    pub fn from_interleaved(n_coils: usize, mask: SamplingMask, flat: &[T]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::shape("interleaved complex buffer has odd length"));
        }
        let data = flat.chunks_exact(2).map(|c| Complex::new(c[0], c[1])).collect();
        Self::new(n_coils, mask, data)
    }

    pub fn coil(&self, c: usize) -> &[Complex<T>] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    pub fn to_interleaved(&self) -> Vec<T> {
        interleave(&self.data)
    }

    pub fn energy(&self) -> T {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }
}

pub(crate) fn interleave<T: Real>(data: &[Complex<T>]) -> Vec<T> {
    let mut out = Vec::with_capacity(2 * data.len());
    for v in data {
        out.push(v.re);
        out.push(v.im);
    }
    out
}

pub(crate) fn image_to_complex<T: Real>(x: &Image<T>) -> Vec<Complex<T>> {
    x.channel(0)
        .iter()
        .zip(x.channel(1))
        .map(|(&re, &im)| Complex::new(re, im))
        .collect()
}

pub(crate) fn complex_to_image<T: Real>(height: usize, width: usize, v: &[Complex<T>]) -> Image<T> {
    let shape = ImageShape::new(2, height, width);
    let p = height * width;
    let mut img = Image::zeros(shape);
    for (k, c) in v.iter().enumerate() {
        img.data_mut()[k] = c.re;
        img.data_mut()[p + k] = c.im;
    }
    img
}

/// Multi-coil MRI measurement model with a SENSE-style zero-filled
/// pseudo-inverse `Σ_i conj(C_i) F⁻¹(M k_i) / Σ_i |C_i|²`.
#[derive(Clone)]
pub struct MriModel<T: Real> {
    maps: Arc<CoilMaps<T>>,
    mask: Arc<SamplingMask>,
    fft: Fft2<T>,
    inv_energy: Vec<T>,
    zero_pixels: usize,
}

impl<T: Real> fmt::Debug for MriModel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MriModel")
            .field("n_coils", &self.maps.n_coils)
            .field("height", &self.maps.height)
            .field("width", &self.maps.width)
            .field("sampled", &self.mask.sampled())
            .finish()
    }
}

impl<T: Real> MriModel<T> {
    pub fn new(maps: CoilMaps<T>, mask: SamplingMask) -> Result<Self> {
        if maps.height != mask.height || maps.width != mask.width {
            return Err(Error::shape(format!(
                "coil maps {}x{} do not match mask {}x{}",
                maps.height, maps.width, mask.height, mask.width
            )));
        }
        ImageShape::new(2, maps.height, maps.width).check_grid()?;
        let fft = Fft2::new(maps.height, maps.width);
        Ok(Self::assemble(Arc::new(maps), Arc::new(mask), fft))
    }

    fn assemble(maps: Arc<CoilMaps<T>>, mask: Arc<SamplingMask>, fft: Fft2<T>) -> Self {
        let mut zero_pixels = 0;
        let inv_energy = maps
            .energy()
            .into_iter()
            .map(|e| {
                if e > T::zero() {
                    T::one() / e
                } else {
                    zero_pixels += 1;
                    T::zero()
                }
            })
            .collect();
        Self {
            maps,
            mask,
            fft,
            inv_energy,
            zero_pixels,
        }
    }

    /// Same mask and transform, different sensitivity maps.
    pub fn with_maps(&self, maps: CoilMaps<T>) -> Result<Self> {
        if maps.height != self.maps.height || maps.width != self.maps.width {
            return Err(Error::shape("replacement coil maps change the grid"));
        }
        Ok(Self::assemble(Arc::new(maps), self.mask.clone(), self.fft.clone()))
    }

    pub fn maps(&self) -> &CoilMaps<T> {
        &self.maps
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn n_coils(&self) -> usize {
        self.maps.n_coils
    }

    /// Pixels where every coil has zero sensitivity; the pseudo-inverse sets
    /// them to zero.
    pub fn zero_sensitivity_pixels(&self) -> usize {
        self.zero_pixels
    }

    fn plane(&self) -> usize {
        self.maps.height * self.maps.width
    }

    /// Per-coil masked k-space as complex planes.
    pub fn forward_complex(&self, x: &[Complex<T>]) -> Vec<Complex<T>> {
        let p = self.plane();
        let mut out = vec![Complex::new(T::zero(), T::zero()); self.n_coils() * p];
        out.par_chunks_mut(p).enumerate().for_each(|(c, buf)| {
            for ((b, s), v) in buf.iter_mut().zip(self.maps.coil(c)).zip(x) {
                *b = s * v;
            }
            self.fft.forward(buf);
            for (b, &m) in buf.iter_mut().zip(self.mask.as_slice()) {
                if !m {
                    *b = Complex::new(T::zero(), T::zero());
                }
            }
        });
        out
    }

    /// `Σ_i conj(C_i) F⁻¹(M k_i)` on complex planes.
    pub fn adjoint_complex(&self, k: &[Complex<T>]) -> Vec<Complex<T>> {
        let p = self.plane();
        assert_eq!(k.len(), self.n_coils() * p, "MRI adjoint k-space length");
        let per_coil: Vec<Vec<Complex<T>>> = (0..self.n_coils())
            .into_par_iter()
            .map(|c| {
                let mut buf: Vec<Complex<T>> = k[c * p..(c + 1) * p]
                    .iter()
                    .zip(self.mask.as_slice())
                    .map(|(&v, &m)| if m { v } else { Complex::new(T::zero(), T::zero()) })
                    .collect();
                self.fft.inverse(&mut buf);
                for (b, s) in buf.iter_mut().zip(self.maps.coil(c)) {
                    *b = s.conj() * *b;
                }
                buf
            })
            .collect();
        let mut out = vec![Complex::new(T::zero(), T::zero()); p];
        for img in per_coil {
            for (o, v) in out.iter_mut().zip(img) {
                *o += v;
            }
        }
        out
    }

    fn weight(&self, v: &mut [Complex<T>]) {
        for (x, &w) in v.iter_mut().zip(&self.inv_energy) {
            *x = *x * w;
        }
    }
}

fn deinterleave<T: Real>(y: &[T]) -> Vec<Complex<T>> {
    y.chunks_exact(2).map(|c| Complex::new(c[0], c[1])).collect()
}

impl<T: Real> LinearModel<T> for MriModel<T> {
    fn image_shape(&self) -> ImageShape {
        ImageShape::new(2, self.maps.height, self.maps.width)
    }

    fn measurement_len(&self) -> usize {
        2 * self.n_coils() * self.plane()
    }

    fn forward(&self, x: &Image<T>) -> Vec<T> {
        assert_eq!(x.shape(), self.image_shape(), "MRI forward image shape");
        interleave(&self.forward_complex(&image_to_complex(x)))
    }

    fn adjoint(&self, y: &[T]) -> Image<T> {
        let v = self.adjoint_complex(&deinterleave(y));
        complex_to_image(self.maps.height, self.maps.width, &v)
    }

    fn pinv(&self, y: &[T]) -> Image<T> {
        let mut v = self.adjoint_complex(&deinterleave(y));
        self.weight(&mut v);
        complex_to_image(self.maps.height, self.maps.width, &v)
    }

    fn pinv_adjoint(&self, x: &Image<T>) -> Vec<T> {
        let mut v = image_to_complex(x);
        self.weight(&mut v);
        interleave(&self.forward_complex(&v))
    }
}

/// `k_i = M ∘ F(C_i x)` for a two-channel image.
pub fn mri_forward<T: Real>(image: &Image<T>, maps: &CoilMaps<T>, mask: &SamplingMask) -> Result<KSpaceStack<T>> {
    let shape = image.shape();
    if shape.channels != 2 || shape.height != maps.height || shape.width != maps.width {
        return Err(Error::shape(format!(
            "image {:?} does not match {} coil maps of {}x{}",
            shape, maps.n_coils, maps.height, maps.width
        )));
    }
    let model = MriModel::new(maps.clone(), mask.clone())?;
    let data = model.forward_complex(&image_to_complex(image));
    KSpaceStack::new(maps.n_coils, mask.clone(), data)
}

/// Coil-combined zero-filled reconstruction; also reports the number of
/// pixels with no coil sensitivity.
pub fn mri_pinv<T: Real>(k: &KSpaceStack<T>, maps: &CoilMaps<T>) -> Result<(Image<T>, usize)> {
    if k.n_coils != maps.n_coils {
        return Err(Error::shape(format!(
            "k-space has {} coils but maps have {}",
            k.n_coils, maps.n_coils
        )));
    }
    let model = MriModel::new(maps.clone(), k.mask.clone())?;
    let mut v = model.adjoint_complex(&k.data);
    model.weight(&mut v);
    Ok((complex_to_image(k.height, k.width, &v), model.zero_sensitivity_pixels()))
}
