//! Layer kernels with hand-written backward passes. Activations are
//! [`Image`]s with an arbitrary channel count.

use rayon::prelude::*;

use crate::image::{Image, ImageShape};
use crate::scalar::Real;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// `(cin*k*k) x (h*w)` patch matrix for a stride-1, zero-padded conv.
fn im2col<T: Real>(x: &Image<T>, k: usize) -> Vec<T> {
    let (cin, h, w) = (x.channels(), x.height(), x.width());
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut cols = vec![T::zero(); cin * k * k * hw];
    cols.par_chunks_mut(hw).enumerate().for_each(|(r, row)| {
        let ci = r / (k * k);
        let ky = (r / k) % k;
        let kx = r % k;
        let plane = x.channel(ci);
        let dy = ky as isize - pad;
        let dx = kx as isize - pad;
        for i in 0..h {
            let si = i as isize + dy;
            if si < 0 || si >= h as isize {
                continue;
            }
            let src = &plane[si as usize * w..(si as usize + 1) * w];
            let dst = &mut row[i * w..(i + 1) * w];
            for j in 0..w {
                let sj = j as isize + dx;
                if sj >= 0 && sj < w as isize {
                    dst[j] = src[sj as usize];
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`].
fn col2im<T: Real>(cols: &[T], shape: ImageShape, k: usize) -> Image<T> {
    let (h, w) = (shape.height, shape.width);
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut out = Image::zeros(shape);
    out.data_mut().par_chunks_mut(hw).enumerate().for_each(|(ci, plane)| {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for i in 0..h {
                    let si = i as isize + dy;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let sj = j as isize + dx;
                        if sj >= 0 && sj < w as isize {
                            plane[si as usize * w + sj as usize] += row[i * w + j];
                        }
                    }
                }
            }
        }
    });
    out
}

/// Stride-1 "same" convolution. `weight` is `[cout][cin][k][k]`.
pub fn conv_forward<T: Real>(x: &Image<T>, weight: &[T], bias: Option<&[T]>, cout: usize, k: usize) -> Image<T> {
    let (cin, h, w) = (x.channels(), x.height(), x.width());
    let hw = h * w;
    let kk = cin * k * k;
    assert_eq!(weight.len(), cout * kk, "conv weight size");
    let mut out = Image::zeros(ImageShape::new(cout, h, w));
    let patches;
    let b: &[T] = if k == 1 {
        x.data()
    } else {
        patches = im2col(x, k);
        &patches
    };
    T::gemm(
        cout,
        kk,
        hw,
        T::one(),
        weight,
        kk as isize,
        1,
        b,
        hw as isize,
        1,
        T::zero(),
        out.data_mut(),
        hw as isize,
        1,
    );
    if let Some(bias) = bias {
        for (plane, &bv) in out.data_mut().chunks_mut(hw).zip(bias) {
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn conv_backward<T: Real>(
    x: &Image<T>,
    weight: &[T],
    cout: usize,
    k: usize,
    dy: &Image<T>,
    dweight: &mut [T],
    dbias: Option<&mut [T]>,
) -> Image<T> {
    let (cin, h, w) = (x.channels(), x.height(), x.width());
    let hw = h * w;
    let kk = cin * k * k;
    let patches;
    let b: &[T] = if k == 1 {
        x.data()
    } else {
        patches = im2col(x, k);
        &patches
    };
    // dW += dY · colsᵀ
    T::gemm(
        cout,
        hw,
        kk,
        T::one(),
        dy.data(),
        hw as isize,
        1,
        b,
        1,
        hw as isize,
        T::one(),
        dweight,
        kk as isize,
        1,
    );
    if let Some(db) = dbias {
        for (g, plane) in db.iter_mut().zip(dy.data().chunks(hw)) {
            *g += plane.iter().copied().sum::<T>();
        }
    }
    // dcols = Wᵀ · dY
    let mut dcols = vec![T::zero(); kk * hw];
    T::gemm(
        kk,
        cout,
        hw,
        T::one(),
        weight,
        1,
        kk as isize,
        dy.data(),
        hw as isize,
        1,
        T::zero(),
        &mut dcols,
        hw as isize,
        1,
    );
    if k == 1 {
        Image::from_vec(x.shape(), dcols).expect("shape")
    } else {
        col2im(&dcols, x.shape(), k)
    }
}

/// Per-channel statistics saved by a batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    /// Unbiased variance, used for the running estimate.
    pub var_unbiased: Vec<T>,
    pub batch: bool,
}

/// Normalizes each channel over its spatial extent, or with the given
/// running statistics when `running` is set.
pub fn bn_forward<T: Real>(
    x: &Image<T>,
    gamma: &[T],
    beta: &[T],
    running: Option<(&[T], &[T])>,
) -> (Image<T>, BnStats<T>) {
    let hw = x.shape().plane();
    let n = T::from_usize_lossy(hw);
    let eps = T::lit(BN_EPS);
    let mut stats = BnStats {
        mean: Vec::with_capacity(x.channels()),
        inv_std: Vec::with_capacity(x.channels()),
        var_unbiased: Vec::with_capacity(x.channels()),
        batch: running.is_none(),
    };
    let mut out = x.clone();
    for (c, plane) in out.data_mut().chunks_mut(hw).enumerate() {
        let (mean, var) = match running {
            Some((rm, rv)) => (rm[c], rv[c]),
            None => {
                let mean = plane.iter().copied().sum::<T>() / n;
                let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                (mean, var)
            }
        };
        let inv = T::one() / (var + eps).sqrt();
        let unbiased = if hw > 1 { var * n / (n - T::one()) } else { var };
        let (g, b) = (gamma[c], beta[c]);
        plane.iter_mut().for_each(|v| *v = g * (*v - mean) * inv + b);
        stats.mean.push(mean);
        stats.inv_std.push(inv);
        stats.var_unbiased.push(unbiased);
    }
    (out, stats)
}

pub fn bn_backward<T: Real>(
    x: &Image<T>,
    gamma: &[T],
    stats: &BnStats<T>,
    dy: &Image<T>,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Image<T> {
    let hw = x.shape().plane();
    let n = T::from_usize_lossy(hw);
    let mut dx = Image::zeros(x.shape());
    for (c, ((dxp, xp), dyp)) in dx
        .data_mut()
        .chunks_mut(hw)
        .zip(x.data().chunks(hw))
        .zip(dy.data().chunks(hw))
        .enumerate()
    {
        let (mean, inv) = (stats.mean[c], stats.inv_std[c]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for (&xv, &g) in xp.iter().zip(dyp) {
            sum_dy += g;
            sum_dy_xhat += g * (xv - mean) * inv;
        }
        dgamma[c] += sum_dy_xhat;
        dbeta[c] += sum_dy;
        let scale = gamma[c] * inv;
        if stats.batch {
            for ((d, &xv), &g) in dxp.iter_mut().zip(xp).zip(dyp) {
                let xhat = (xv - mean) * inv;
                *d = scale * (g - sum_dy / n - xhat * sum_dy_xhat / n);
            }
        } else {
            for (d, &g) in dxp.iter_mut().zip(dyp) {
                *d = scale * g;
            }
        }
    }
    dx
}

pub fn relu_forward<T: Real>(x: &Image<T>) -> Image<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    y
}

/// Gradient through ReLU given its output.
pub fn relu_backward<T: Real>(y: &Image<T>, dy: &Image<T>) -> Image<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Image::from_vec(y.shape(), data).expect("shape")
}

/// 2x2 max pool; returns the flat argmax of every output pixel.
pub fn maxpool_forward<T: Real>(x: &Image<T>) -> (Image<T>, Vec<u32>) {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool needs even extents");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Image::zeros(ImageShape::new(c, oh, ow));
    let mut arg = vec![0u32; c * oh * ow];
    let src = x.data();
    let mut o = 0;
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let base = (ci * h + 2 * i) * w + 2 * j;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.data_mut()[o] = src[best];
                arg[o] = best as u32;
                o += 1;
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<T: Real>(input_shape: ImageShape, arg: &[u32], dy: &Image<T>) -> Image<T> {
    let mut dx = Image::zeros(input_shape);
    for (&a, &g) in arg.iter().zip(dy.data()) {
        dx.data_mut()[a as usize] += g;
    }
    dx
}

/// Nearest-neighbour x2 upsampling.
pub fn upsample_forward<T: Real>(x: &Image<T>) -> Image<T> {
    let (h, w) = (x.height(), x.width());
    Image::from_fn(ImageShape::new(x.channels(), 2 * h, 2 * w), |c, i, j| {
        x.at(c, i / 2, j / 2)
    })
}

pub fn upsample_backward<T: Real>(dy: &Image<T>) -> Image<T> {
    let (h, w) = (dy.height() / 2, dy.width() / 2);
    Image::from_fn(ImageShape::new(dy.channels(), h, w), |c, i, j| {
        dy.at(c, 2 * i, 2 * j)
            + dy.at(c, 2 * i + 1, 2 * j)
            + dy.at(c, 2 * i, 2 * j + 1)
            + dy.at(c, 2 * i + 1, 2 * j + 1)
    })
}

pub fn concat<T: Real>(a: &Image<T>, b: &Image<T>) -> Image<T> {
    assert_eq!((a.height(), a.width()), (b.height(), b.width()), "concat extents");
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Image::from_vec(
        ImageShape::new(a.channels() + b.channels(), a.height(), a.width()),
        data,
    )
    .expect("shape")
}

pub fn split<T: Real>(x: &Image<T>, first: usize) -> (Image<T>, Image<T>) {
    let hw = x.shape().plane();
    let (h, w) = (x.height(), x.width());
    let (a, b) = x.data().split_at(first * hw);
    (
        Image::from_vec(ImageShape::new(first, h, w), a.to_vec()).expect("shape"),
        Image::from_vec(ImageShape::new(x.channels() - first, h, w), b.to_vec()).expect("shape"),
    )
}

/// Zero-pads on the bottom/right to `(h, w)`.
pub fn pad_to<T: Real>(x: &Image<T>, h: usize, w: usize) -> Image<T> {
    if (x.height(), x.width()) == (h, w) {
        return x.clone();
    }
    Image::from_fn(ImageShape::new(x.channels(), h, w), |c, i, j| {
        if i < x.height() && j < x.width() {
            x.at(c, i, j)
        } else {
            T::zero()
        }
    })
}

pub fn crop_to<T: Real>(x: &Image<T>, h: usize, w: usize) -> Image<T> {
    if (x.height(), x.width()) == (h, w) {
        return x.clone();
    }
    Image::from_fn(ImageShape::new(x.channels(), h, w), |c, i, j| x.at(c, i, j))
}
