//! Loading external images and k-space, and writing previews.

use std::path::Path;

use anyhow::{bail, Context, Result};
use image::imageops::FilterType;
use image::{GrayImage, Luma};
use skei::linops::{CoilMaps, KSpaceStack, SamplingMask};
use skei::num_complex::Complex;
use skei::{Image, ImageShape};

use crate::rawarray::RawArray;

/// Grayscale image scaled to `[0, 1]` and bilinearly resized to
/// `size x size`. Raw arrays (`.raw`) of shape `[h, w]` are accepted too.
pub fn ingest_image(path: &Path, size: usize) -> Result<Image<f32>> {
    let gray = if path.extension().is_some_and(|e| e == "raw") {
        let a = RawArray::read(path)?;
        if a.complex_interleaved || a.shape.len() != 2 {
            bail!("{}: expected a real [h, w] array, got {:?}", path.display(), a.shape);
        }
        let (h, w) = (a.shape[0], a.shape[1]);
        let (lo, hi) = a
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        image::ImageBuffer::<Luma<f32>, _>::from_raw(
            w as u32,
            h as u32,
            a.data.iter().map(|v| (v - lo) / span).collect::<Vec<_>>(),
        )
        .context("raw image buffer")?
    } else {
        let img = image::open(path).with_context(|| format!("cannot read image {}", path.display()))?;
        let g = img.to_luma32f();
        let (lo, hi) = g.pixels().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), p| {
            (l.min(p[0]), h.max(p[0]))
        });
        if !(hi >= lo) {
            bail!("{}: empty image", path.display());
        }
        let mut g = g;
        if lo < 0.0 || hi > 1.0 {
            let span = if hi > lo { hi - lo } else { 1.0 };
            g.pixels_mut().for_each(|p| p[0] = (p[0] - lo) / span);
        }
        g
    };
    let resized = if gray.width() as usize == size && gray.height() as usize == size {
        gray
    } else {
        image::imageops::resize(&gray, size as u32, size as u32, FilterType::Triangle)
    };
    let data = resized.pixels().map(|p| p[0].clamp(0.0, 1.0)).collect();
    Ok(Image::from_vec(ImageShape::new(1, size, size), data)?)
}

/// Complex k-space `[coils, h, w]`; entries outside `mask` are zeroed.
pub fn ingest_kspace(path: &Path, mask: SamplingMask) -> Result<KSpaceStack<f32>> {
    let a = RawArray::read(path)?;
    if !a.complex_interleaved || a.shape.len() != 3 {
        bail!(
            "{}: k-space must be a complex [coils, h, w] array, got {:?}",
            path.display(),
            a.shape
        );
    }
    if a.shape[1] != mask.height || a.shape[2] != mask.width {
        bail!(
            "{}: k-space is {}x{}, expected {}x{}",
            path.display(),
            a.shape[1],
            a.shape[2],
            mask.height,
            mask.width
        );
    }
    Ok(KSpaceStack::from_interleaved(a.shape[0], mask, &a.data)?)
}

pub fn ingest_maps(path: &Path) -> Result<CoilMaps<f32>> {
    let a = RawArray::read(path)?;
    if !a.complex_interleaved || a.shape.len() != 3 {
        bail!(
            "{}: maps must be a complex [coils, h, w] array, got {:?}",
            path.display(),
            a.shape
        );
    }
    let data = a.data.chunks_exact(2).map(|c| Complex::new(c[0], c[1])).collect();
    Ok(CoilMaps::new(a.shape[0], a.shape[1], a.shape[2], data)?)
}

pub fn kspace_to_raw(k: &KSpaceStack<f32>) -> RawArray {
    RawArray::new(vec![k.n_coils, k.height, k.width], true, k.to_interleaved()).expect("consistent k-space")
}

/// Real images become `[h, w]`; two-channel images become complex `[h, w]`.
pub fn image_to_raw(x: &Image<f32>) -> RawArray {
    let (h, w) = (x.height(), x.width());
    match x.channels() {
        1 => RawArray::new(vec![h, w], false, x.data().to_vec()).expect("consistent image"),
        2 => {
            let (re, im) = x.data().split_at(h * w);
            let data = re.iter().zip(im).flat_map(|(&a, &b)| [a, b]).collect();
            RawArray::new(vec![h, w], true, data).expect("consistent image")
        }
        c => RawArray::new(vec![c, h, w], false, x.data().to_vec()).expect("consistent image"),
    }
}

/// 8-bit preview: magnitude over channels, scaled by `peak` (or the max).
pub fn preview_png(x: &Image<f32>, peak: Option<f64>, path: &Path) -> Result<()> {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let mag: Vec<f32> = (0..h * w)
        .map(|p| (0..c).map(|k| x.data()[k * h * w + p].powi(2)).sum::<f32>().sqrt())
        .collect();
    let top = peak
        .map(|p| p as f32)
        .unwrap_or_else(|| mag.iter().cloned().fold(0.0, f32::max))
        .max(f32::MIN_POSITIVE);
    let img = GrayImage::from_fn(w as u32, h as u32, |j, i| {
        Luma([(mag[i as usize * w + j as usize] / top * 255.0)
            .round()
            .clamp(0.0, 255.0) as u8])
    });
    let tmp = path.with_extension("tmp.png");
    img.save(&tmp).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
