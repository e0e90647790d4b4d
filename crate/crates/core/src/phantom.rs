//! Synthetic test objects: Shepp-Logan, disk catalogs, coil sensitivities.

use num_complex::Complex;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, ImageShape};
use crate::linops::CoilMaps;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    #[default]
    SheppLogan,
    Disks,
}

/// Subsamples per pixel axis used for anti-aliased rasterization.
const SUPERSAMPLE: usize = 8;

/// `(intensity, semi-axis a, semi-axis b, x0, y0, rotation in degrees)`
/// in normalized `[-1, 1]` coordinates.
const SHEPP_LOGAN: [(f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

/// `(x0, y0, radius, intensity)` in normalized coordinates; non-overlapping.
pub const DISK_CATALOG: [(f64, f64, f64, f64); 5] = [
    (0.0, 0.0, 0.35, 0.6),
    (-0.5, 0.45, 0.15, 1.0),
    (0.5, 0.45, 0.12, 0.8),
    (0.45, -0.5, 0.18, 0.4),
    (-0.45, -0.5, 0.1, 0.9),
];

fn rasterize<T: Real>(size: usize, f: impl Fn(f64, f64) -> f64) -> Image<T> {
    let ss = SUPERSAMPLE;
    let half = size as f64 / 2.0;
    Image::from_fn(ImageShape::new(1, size, size), |_, i, j| {
        let mut acc = 0.0;
        for si in 0..ss {
            for sj in 0..ss {
                let px = j as f64 + (sj as f64 + 0.5) / ss as f64;
                let py = i as f64 + (si as f64 + 0.5) / ss as f64;
                acc += f((px - half) / half, (half - py) / half);
            }
        }
        T::lit((acc / (ss * ss) as f64).clamp(0.0, 1.0))
    })
}

/// Modified Shepp-Logan head phantom with values in `[0, 1]`.
pub fn shepp_logan<T: Real>(size: usize) -> Image<T> {
    rasterize(size, |x, y| ellipse_sum(&SHEPP_LOGAN, x, y))
}

/// The fixed disk catalog rasterized on a `size x size` grid.
pub fn disks<T: Real>(size: usize) -> Image<T> {
    rasterize(size, |x, y| {
        DISK_CATALOG
            .iter()
            .filter(|&&(x0, y0, r, _)| (x - x0).powi(2) + (y - y0).powi(2) <= r * r)
            .map(|&(_, _, _, v)| v)
            .sum()
    })
}

/// Analytic integral of [`disks`] in pixel units.
pub fn disks_mass(size: usize) -> f64 {
    let half = size as f64 / 2.0;
    DISK_CATALOG
        .iter()
        .map(|&(_, _, r, v)| v * std::f64::consts::PI * (r * half).powi(2))
        .sum()
}

/// Single centred disk of `radius` pixels.
pub fn disk<T: Real>(size: usize, radius: f64, intensity: f64) -> Image<T> {
    let rn = radius / (size as f64 / 2.0);
    rasterize(size, |x, y| if x * x + y * y <= rn * rn { intensity } else { 0.0 })
}

pub fn make_phantom<T: Real>(kind: PhantomKind, size: usize) -> Result<Image<T>> {
    if size < 16 {
        return Err(Error::config("image_size", "phantoms need size >= 16"));
    }
    Ok(match kind {
        PhantomKind::SheppLogan => shepp_logan(size),
        PhantomKind::Disks => disks(size),
    })
}

/// Random head-like phantom: a skull ring around a soft-tissue body with
/// `n_features` random inner ellipses. Values lie in `[0, 1]`.
pub fn random_ellipses<T: Real, R: Rng + ?Sized>(size: usize, n_features: usize, rng: &mut R) -> Image<T> {
    let a = rng.random_range(0.55..0.75);
    let b = rng.random_range(0.7..0.92);
    let rot = rng.random_range(-15.0..15.0);
    let mut list = vec![(1.0, a, b, 0.0, 0.0, rot), (-0.8, a - 0.03, b - 0.04, 0.0, 0.0, rot)];
    for _ in 0..n_features {
        let r = rng.random_range(0.0..0.6);
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        list.push((
            rng.random_range(0.05..0.35) * if rng.random_bool(0.25) { -0.5 } else { 1.0 },
            rng.random_range(0.03..0.25),
            rng.random_range(0.03..0.25),
            r * a * t.cos(),
            r * b * t.sin(),
            rng.random_range(0.0..180.0),
        ));
    }
    rasterize(size, |x, y| ellipse_sum(&list, x, y))
}

fn ellipse_sum(list: &[(f64, f64, f64, f64, f64, f64)], x: f64, y: f64) -> f64 {
    list.iter()
        .map(|&(v, a, b, x0, y0, phi)| {
            let (s, c) = phi.to_radians().sin_cos();
            let (dx, dy) = (x - x0, y - y0);
            let u = dx * c + dy * s;
            let w = -dx * s + dy * c;
            if (u / a).powi(2) + (w / b).powi(2) <= 1.0 {
                v
            } else {
                0.0
            }
        })
        .sum()
}

/// Two-channel complex image: `magnitude · exp(i φ)` with a gentle linear
/// phase ramp.
pub fn complex_phantom<T: Real>(magnitude: &Image<T>) -> Image<T> {
    let (h, w) = (magnitude.height(), magnitude.width());
    Image::from_fn(ImageShape::new(2, h, w), |c, i, j| {
        let x = (j as f64 - w as f64 / 2.0) / w as f64;
        let y = (i as f64 - h as f64 / 2.0) / h as f64;
        let phi = 0.4 * x - 0.3 * y;
        let m = magnitude.at(0, i, j).as_f64();
        T::lit(if c == 0 { m * phi.cos() } else { m * phi.sin() })
    })
}

/// Smooth complex sensitivities for coils placed on a ring around the
/// field of view. Every map is strictly non-zero.
pub fn synthetic_coil_maps<T: Real>(n_coils: usize, height: usize, width: usize) -> CoilMaps<T> {
    let mut data = Vec::with_capacity(n_coils * height * width);
    for c in 0..n_coils {
        let ang = 2.0 * std::f64::consts::PI * c as f64 / n_coils as f64;
        let (cx, cy) = (1.3 * ang.cos(), 1.3 * ang.sin());
        for i in 0..height {
            for j in 0..width {
                let x = 2.0 * (j as f64 + 0.5) / width as f64 - 1.0;
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / height as f64;
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                let mag = (-d2 / (2.0 * 0.9f64.powi(2))).exp();
                let phase = ang + 0.5 * (x * ang.cos() + y * ang.sin());
                data.push(Complex::new(T::lit(mag * phase.cos()), T::lit(mag * phase.sin())));
            }
        }
    }
    CoilMaps::new(n_coils, height, width, data).expect("synthetic maps are well-formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shepp_logan_range_and_corners() {
        let p = shepp_logan::<f64>(128);
        assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(p.at(0, 0, 0), 0.0);
        assert_eq!(p.at(0, 127, 127), 0.0);
        assert_eq!(p.at(0, 0, 127), 0.0);
        assert!(p.at(0, 64, 64) > 0.0);
        assert_eq!(p, shepp_logan::<f64>(128));
    }

    #[test]
    fn disk_catalog_mass_matches_analytic_area() {
        let img = make_phantom::<f64>(PhantomKind::Disks, 64).unwrap();
        let analytic = disks_mass(64);
        assert!((img.sum() - analytic).abs() / analytic < 0.01);
    }

    #[test]
    fn random_ellipses_vary_and_stay_in_range() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = random_ellipses::<f64, _>(48, 6, &mut rng);
        let b = random_ellipses::<f64, _>(48, 6, &mut rng);
        assert_ne!(a, b);
        for p in [&a, &b] {
            assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(p.at(0, 0, 0), 0.0);
            assert!(p.max() > 0.5);
        }
    }

    #[test]
    fn too_small_is_rejected() {
        assert!(make_phantom::<f32>(PhantomKind::SheppLogan, 8).is_err());
    }

    #[test]
    fn coil_maps_are_nonvanishing() {
        let maps = synthetic_coil_maps::<f64>(8, 32, 32);
        assert!(maps.energy().iter().all(|&e| e > 1e-3));
    }
}
