//! Planar rotation group acting on images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Real;

/// Cyclic rotation group with `order` elements `1..=order`; element `g`
/// rotates by `360 g / order` degrees, so element `order` is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationGroup {
    pub order: u32,
}

impl Default for RotationGroup {
    fn default() -> Self {
        Self { order: 360 }
    }
}

impl RotationGroup {
    pub fn new(order: u32) -> Result<Self> {
        if order == 0 {
            return Err(Error::config("group_order", "must be at least 1"));
        }
        Ok(Self { order })
    }

    pub fn degrees(&self, g: u32) -> f64 {
        360.0 * f64::from(g) / f64::from(self.order)
    }

    pub fn inverse(&self, g: u32) -> u32 {
        if g % self.order == 0 {
            self.order
        } else {
            self.order - g % self.order
        }
    }

    /// Uniform draw from `1..=order`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        rng.random_range(1..=self.order)
    }
}

pub fn sample_group<R: Rng + ?Sized>(group: &RotationGroup, rng: &mut R) -> u32 {
    group.sample(rng)
}

enum Plan {
    Identity,
    /// Quarter turns counter-clockwise on a square grid.
    Quarter(u32),
    Bilinear {
        cos: f64,
        sin: f64,
    },
}

fn plan(degrees: f64, square: bool) -> Plan {
    let d = degrees.rem_euclid(360.0);
    if d == 0.0 {
        return Plan::Identity;
    }
    if square && d % 90.0 == 0.0 {
        return Plan::Quarter((d / 90.0) as u32);
    }
    let r = d.to_radians();
    Plan::Bilinear {
        cos: r.cos(),
        sin: r.sin(),
    }
}

/// Source location of output pixel `(i, j)` for a counter-clockwise turn.
#[inline]
fn source(i: usize, j: usize, ci: f64, cj: f64, cos: f64, sin: f64) -> (f64, f64) {
    let dx = j as f64 - cj;
    let dy = ci - i as f64;
    let sx = cos * dx + sin * dy;
    let sy = -sin * dx + cos * dy;
    (ci - sy, sx + cj)
}

#[inline]
fn quarter_source(i: usize, j: usize, n: usize, q: u32) -> (usize, usize) {
    match q {
        1 => (j, n - 1 - i),
        2 => (n - 1 - i, n - 1 - j),
        3 => (n - 1 - j, i),
        _ => (i, j),
    }
}

/// Bilinear taps `(index, weight)` into an `h x w` plane; out-of-grid taps
/// are dropped (zero padding).
#[inline]
fn taps(si: f64, sj: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let i0 = si.floor();
    let j0 = sj.floor();
    let fi = si - i0;
    let fj = sj - j0;
    let (i0, j0) = (i0 as isize, j0 as isize);
    let mut out = [(0usize, 0.0f64); 4];
    let cand = [
        (i0, j0, (1.0 - fi) * (1.0 - fj)),
        (i0, j0 + 1, (1.0 - fi) * fj),
        (i0 + 1, j0, fi * (1.0 - fj)),
        (i0 + 1, j0 + 1, fi * fj),
    ];
    for (slot, (ii, jj, wt)) in out.iter_mut().zip(cand) {
        if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
            *slot = (ii as usize * w + jj as usize, wt);
        }
    }
    out
}

/// Rotates every channel by `degrees` counter-clockwise about the image
/// centre with bilinear interpolation and zero padding.
pub fn rotate<T: Real>(image: &Image<T>, degrees: f64) -> Image<T> {
    let (h, w) = (image.height(), image.width());
    match plan(degrees, h == w) {
        Plan::Identity => image.clone(),
        Plan::Quarter(q) => Image::from_fn(image.shape(), |c, i, j| {
            let (si, sj) = quarter_source(i, j, h, q);
            image.at(c, si, sj)
        }),
        Plan::Bilinear { cos, sin } => {
            let (ci, cj) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            let mut out = Image::zeros(image.shape());
            for c in 0..image.channels() {
                let src = image.channel(c);
                let dst = out.channel_mut(c);
                for i in 0..h {
                    for j in 0..w {
                        let (si, sj) = source(i, j, ci, cj, cos, sin);
                        let mut acc = T::zero();
                        for (k, wt) in taps(si, sj, h, w) {
                            if wt != 0.0 {
                                acc += src[k] * T::lit(wt);
                            }
                        }
                        dst[i * w + j] = acc;
                    }
                }
            }
            out
        }
    }
}

/// Transpose of [`rotate`] (scatter with the same bilinear weights).
pub fn rotate_adjoint<T: Real>(grad: &Image<T>, degrees: f64) -> Image<T> {
    let (h, w) = (grad.height(), grad.width());
    match plan(degrees, h == w) {
        Plan::Identity => grad.clone(),
        Plan::Quarter(q) => {
            let mut out = Image::zeros(grad.shape());
            for c in 0..grad.channels() {
                for i in 0..h {
                    for j in 0..w {
                        let (si, sj) = quarter_source(i, j, h, q);
                        *out.at_mut(c, si, sj) = grad.at(c, i, j);
                    }
                }
            }
            out
        }
        Plan::Bilinear { cos, sin } => {
            let (ci, cj) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            let mut out = Image::zeros(grad.shape());
            for c in 0..grad.channels() {
                let src = grad.channel(c).to_vec();
                let dst = out.channel_mut(c);
                for i in 0..h {
                    for j in 0..w {
                        let g = src[i * w + j];
                        if g == T::zero() {
                            continue;
                        }
                        let (si, sj) = source(i, j, ci, cj, cos, sin);
                        for (k, wt) in taps(si, sj, h, w) {
                            if wt != 0.0 {
                                dst[k] += g * T::lit(wt);
                            }
                        }
                    }
                }
            }
            out
        }
    }
}

/// Applies group element `g`.
pub fn apply_rotation<T: Real>(image: &Image<T>, group: &RotationGroup, g: u32) -> Result<Image<T>> {
    if g == 0 || g > group.order {
        return Err(Error::config("g", format!("element {g} outside 1..={}", group.order)));
    }
    Ok(rotate(image, group.degrees(g)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::psnr;
    use crate::image::ImageShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn smooth(n: usize) -> Image<f64> {
        Image::from_fn(ImageShape::new(1, n, n), |_, i, j| {
            let (x, y) = (i as f64 / n as f64 - 0.5, j as f64 / n as f64 - 0.5);
            (-(x * x + y * y) * 8.0).exp() * (1.0 + 0.3 * (6.0 * x).sin() * (4.0 * y).cos())
        })
    }

    fn interior(img: &Image<f64>, radius: f64) -> Vec<f64> {
        let n = img.height();
        let c = (n as f64 - 1.0) / 2.0;
        let mut out = vec![];
        for i in 0..n {
            for j in 0..n {
                if ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt() <= radius {
                    out.push(img.at(0, i, j));
                }
            }
        }
        out
    }

    #[test]
    fn identity_element_is_exact() {
        let g = RotationGroup::default();
        let x = smooth(32);
        assert_eq!(apply_rotation(&x, &g, 360).unwrap(), x);
    }

    #[test]
    fn quarter_turns_are_lossless_permutations() {
        let g = RotationGroup::default();
        let x = Image::from_fn(ImageShape::new(2, 16, 16), |c, i, j| (c * 1000 + i * 16 + j) as f64);
        for deg in [90, 180, 270] {
            let r = apply_rotation(&x, &g, deg).unwrap();
            assert_eq!(r.norm_sq(), x.norm_sq());
            let mut a = r.data().to_vec();
            let mut b = x.data().to_vec();
            a.sort_by(|p, q| p.partial_cmp(q).unwrap());
            b.sort_by(|p, q| p.partial_cmp(q).unwrap());
            assert_eq!(a, b);
        }
        // 90 degrees counter-clockwise moves the top-right corner to the top-left.
        let r = apply_rotation(&x, &g, 90).unwrap();
        assert_eq!(r.at(0, 0, 0), x.at(0, 0, 15));
        let four = (0..4).fold(x.clone(), |acc, _| apply_rotation(&acc, &g, 90).unwrap());
        assert_eq!(four, x);
    }

    #[test]
    fn quarter_turn_agrees_with_bilinear_path() {
        let x = smooth(16);
        let exact = rotate(&x, 90.0);
        let approx = rotate(&x, 90.0 + 1e-9);
        assert!(exact.sub(&approx).norm() < 1e-6);
    }

    #[test]
    fn round_trip_37_degrees_preserves_interior() {
        let g = RotationGroup::default();
        let x = smooth(64);
        let back = apply_rotation(&apply_rotation(&x, &g, 37).unwrap(), &g, 323).unwrap();
        let a = interior(&back, 24.0);
        let b = interior(&x, 24.0);
        assert!(psnr(&a, &b, 1.0) >= 40.0, "psnr {}", psnr(&a, &b, 1.0));
    }

    #[test]
    fn adjoint_matches_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for deg in [37.0, 90.0, 200.0, 360.0] {
            let x = Image::from_fn(ImageShape::new(2, 12, 12), |_, _, _| rng.random::<f64>() - 0.5);
            let y = Image::from_fn(ImageShape::new(2, 12, 12), |_, _, _| rng.random::<f64>() - 0.5);
            let lhs = rotate(&x, deg).dot(&y);
            let rhs = x.dot(&rotate_adjoint(&y, deg));
            assert!((lhs - rhs).abs() < 1e-12, "deg {deg}");
        }
    }

    #[test]
    fn rotation_is_linear() {
        let x1 = smooth(20);
        let x2 = Image::from_fn(x1.shape(), |_, i, j| ((i * j) % 5) as f64);
        let (a, b) = (1.7, -0.4);
        let mut comb = x1.scaled(a);
        comb.axpy(b, &x2);
        let lhs = rotate(&comb, 51.0);
        let mut rhs = rotate(&x1, 51.0).scaled(a);
        rhs.axpy(b, &rotate(&x2, 51.0));
        assert!(lhs.sub(&rhs).norm() / rhs.norm() < 1e-6);
    }

    #[test]
    fn sampling_is_uniform_and_reproducible() {
        let trivial = RotationGroup::new(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| sample_group(&trivial, &mut rng) == 1));

        let g = RotationGroup::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws = 100_000;
        let mut counts = vec![0usize; 360];
        for _ in 0..draws {
            counts[(sample_group(&g, &mut rng) - 1) as usize] += 1;
        }
        let expected = draws as f64 / 360.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // Chi-square critical value for 359 degrees of freedom at alpha = 0.01.
        assert!(chi2 < 424.8, "chi2 = {chi2}");

        let mut a = ChaCha8Rng::seed_from_u64(99);
        let mut b = ChaCha8Rng::seed_from_u64(99);
        let sa: Vec<u32> = (0..50).map(|_| g.sample(&mut a)).collect();
        let sb: Vec<u32> = (0..50).map(|_| g.sample(&mut b)).collect();
        assert_eq!(sa, sb);
    }

    #[test]
    fn out_of_range_element_is_rejected() {
        let g = RotationGroup::default();
        let x = smooth(8);
        assert!(apply_rotation(&x, &g, 0).is_err());
        assert!(apply_rotation(&x, &g, 361).is_err());
        assert!(RotationGroup::new(0).is_err());
    }
}
