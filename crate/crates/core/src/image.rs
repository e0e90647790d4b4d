//! Planar multi-channel images.
//!
//! Storage is channel-major, then row-major: `data[(c * height + i) * width + j]`.
//! MRI images use two channels holding the real and imaginary planes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Channel count and spatial extent of an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Checks the grid constraints required by the measurement operators.
    pub fn check_grid(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::shape(format!(
                "image grid must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.channels == 1 || self.channels == 2) {
            return Err(Error::shape(format!(
                "image must have 1 or 2 channels, got {}",
                self.channels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    shape: ImageShape,
    data: Vec<T>,
}

impl<T: Real> Image<T> {
    pub fn zeros(shape: ImageShape) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn from_vec(shape: ImageShape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "buffer of {} values does not fit {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: ImageShape, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for i in 0..shape.height {
                for j in 0..shape.width {
                    data.push(f(c, i, j));
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape.width
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, i: usize, j: usize) -> T {
        self.data[(c * self.shape.height + i) * self.shape.width + j]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, i: usize, j: usize) -> &mut T {
        &mut self.data[(c * self.shape.height + i) * self.shape.width + j]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Self) -> T {
        debug_assert_eq!(self.shape, other.shape);
        dot(&self.data, &other.data)
    }

    pub fn norm_sq(&self) -> T {
        dot(&self.data, &self.data)
    }

    pub fn norm(&self) -> T {
        self.norm_sq().sqrt()
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), |a, b| a.max(b))
    }

    pub fn scale(&mut self, a: T) {
        self.data.iter_mut().for_each(|v| *v *= a);
    }

    pub fn scaled(&self, a: T) -> Self {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: T, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        axpy(&mut self.data, a, &other.data);
    }

    pub fn sub(&self, other: &Self) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        Self {
            shape: self.shape,
            data,
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(T::one(), other);
        out
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Pixelwise magnitude across channels (a single plane).
    pub fn magnitude(&self) -> Vec<T> {
        let p = self.shape.plane();
        (0..p)
            .map(|k| {
                (0..self.shape.channels)
                    .map(|c| {
                        let v = self.data[c * p + k];
                        v * v
                    })
                    .sum::<T>()
                    .sqrt()
            })
            .collect()
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    // Four partial sums keep the reduction order fixed and vectorizable.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * k + l] * b[4 * k + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

#[inline]
pub fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    y.iter_mut().zip(x).for_each(|(y, &x)| *y += a * x);
}

pub fn norm_sq<T: Real>(a: &[T]) -> T {
    dot(a, a)
}

pub fn sub<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}
