//! PCA coil compression, structured coil sketching and classical coil
//! subsampling for multi-coil MRI.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dense::Matrix;
use super::{SketchLabel, SketchedModel};
use crate::error::{Error, Result};
use crate::linops::fft::{signed_freq, Fft2};
use crate::linops::{CoilMaps, KSpaceStack, MeasurementModel, MriModel};
use crate::scalar::Real;

/// Result of PCA coil compression.
#[derive(Clone, Debug)]
pub struct CoilCompression<T> {
    /// `C x L` compression matrix, row-major; columns are the leading
    /// eigenvectors of the coil covariance.
    pub q: Vec<Complex<T>>,
    pub n_coils: usize,
    pub n_virtual: usize,
    /// All `C` covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// `L` virtual coils, `k · Q_L`.
    pub compressed: KSpaceStack<T>,
    /// Virtual-coil sensitivities, once a provider has supplied them.
    pub maps: Option<CoilMaps<T>>,
}

impl<T: Real> CoilCompression<T> {
    /// Rotates physical coil maps into the virtual-coil basis:
    /// `C̃_l = Σ_c Q[c, l] C_c`.
    pub fn compress_maps(&self, maps: &CoilMaps<T>) -> Result<CoilMaps<T>> {
        if maps.n_coils != self.n_coils {
            return Err(Error::shape(format!(
                "maps have {} coils, compression expects {}",
                maps.n_coils, self.n_coils
            )));
        }
        let weights: Vec<Complex<T>> = (0..self.n_virtual)
            .flat_map(|l| (0..self.n_coils).map(move |c| (c, l)))
            .map(|(c, l)| self.q[c * self.n_virtual + l])
            .collect();
        Ok(maps.combine(self.n_virtual, &weights))
    }

    /// Energy of each virtual coil.
    pub fn virtual_energies(&self) -> Vec<f64> {
        (0..self.n_virtual)
            .map(|l| self.compressed.coil(l).iter().map(|v| v.norm_sqr().as_f64()).sum())
            .collect()
    }
}

/// Compresses `C` physical coils to the `L` highest-energy virtual coils.
///
/// Means and covariance use only the sampled k-space locations.
pub fn coil_compress<T: Real>(k: &KSpaceStack<T>, l: usize) -> Result<CoilCompression<T>> {
    let c = k.n_coils;
    if l == 0 || l > c {
        return Err(Error::config("L", format!("L = {l} must lie in 1..={c}")));
    }
    if k.data.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Data("k-space contains non-finite samples".into()));
    }
    let sampled: Vec<usize> = k
        .mask
        .as_slice()
        .iter()
        .enumerate()
        .filter_map(|(p, &m)| m.then_some(p))
        .collect();
    let n = sampled.len();
    if n < 2 {
        return Err(Error::Data("need at least two sampled k-space locations".into()));
    }

    let centred: Vec<Vec<Complex<f64>>> = (0..c)
        .map(|coil| {
            let plane = k.coil(coil);
            let vals: Vec<Complex<f64>> = sampled
                .iter()
                .map(|&p| Complex::new(plane[p].re.as_f64(), plane[p].im.as_f64()))
                .collect();
            let mean = vals.iter().sum::<Complex<f64>>() / n as f64;
            vals.into_iter().map(|v| v - mean).collect()
        })
        .collect();

    let cov = DMatrix::from_fn(c, c, |i, j| {
        centred[i]
            .iter()
            .zip(&centred[j])
            .map(|(a, b)| a.conj() * b)
            .sum::<Complex<f64>>()
            / (n - 1) as f64
    });
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();

    let q: Vec<Complex<T>> = (0..c)
        .flat_map(|row| order[..l].iter().map(move |&col| (row, col)))
        .map(|(row, col)| {
            let v = eig.eigenvectors[(row, col)];
            Complex::new(T::lit(v.re), T::lit(v.im))
        })
        .collect();

    let p = k.height * k.width;
    let mut data = vec![Complex::new(T::zero(), T::zero()); l * p];
    for v in 0..l {
        let out = &mut data[v * p..(v + 1) * p];
        for coil in 0..c {
            let w = q[coil * l + v];
            for (o, s) in out.iter_mut().zip(k.coil(coil)) {
                *o += s * w;
            }
        }
    }
    let compressed = KSpaceStack::new(l, k.mask.clone(), data)?;
    Ok(CoilCompression {
        q,
        n_coils: c,
        n_virtual: l,
        eigenvalues,
        compressed,
        maps: None,
    })
}

/// Real `Ĉ x L` coil-sketch matrix `[[I_R, 0], [0, S̃]]` with `S̃` an
/// `S x (L - R)` Rademacher block.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilSketch {
    pub keep_high: usize,
    pub sketched_low: usize,
    pub matrix: Matrix<f64>,
}

impl CoilSketch {
    pub fn rows(&self) -> usize {
        self.matrix.rows
    }

    pub fn identity(l: usize) -> Self {
        Self {
            keep_high: l,
            sketched_low: 0,
            matrix: Matrix::identity(l),
        }
    }

    /// Entries of the random block.
    pub fn random_block(&self) -> impl Iterator<Item = f64> + '_ {
        let r = self.keep_high;
        (r..self.matrix.rows).flat_map(move |i| (r..self.matrix.cols).map(move |j| self.matrix.get(i, j)))
    }
}

pub fn build_coil_sketch_matrix<R: Rng + ?Sized>(l: usize, r: usize, s: usize, rng: &mut R) -> Result<CoilSketch> {
    if r + s > l {
        return Err(Error::config("R + S", format!("R + S = {} exceeds L = {l}", r + s)));
    }
    if r + s == 0 {
        return Err(Error::config("R + S", "sketch must keep at least one coil"));
    }
    let mut m = Matrix::zeros(r + s, l);
    for i in 0..r {
        m.set(i, i, 1.0);
    }
    for i in r..r + s {
        for j in r..l {
            m.set(i, j, if rng.random::<bool>() { 1.0 } else { -1.0 });
        }
    }
    Ok(CoilSketch {
        keep_high: r,
        sketched_low: s,
        matrix: m,
    })
}

/// Applies a coil sketch to a virtual-coil model and its data:
/// `C_S = S̃ C_L`, `y_S = S̃ ỹ`.
pub fn sketch_mri_model<T: Real>(
    compressed_model: &MriModel<T>,
    compressed: &KSpaceStack<T>,
    sketch: &CoilSketch,
) -> Result<SketchedModel<T>> {
    let l = compressed_model.n_coils();
    if sketch.matrix.cols != l || compressed.n_coils != l {
        return Err(Error::shape(format!(
            "sketch has {} columns, model {} coils, data {} coils",
            sketch.matrix.cols, l, compressed.n_coils
        )));
    }
    let rows = sketch.rows();
    let weights: Vec<Complex<T>> = sketch
        .matrix
        .data
        .iter()
        .map(|&w| Complex::new(T::lit(w), T::zero()))
        .collect();
    let maps = compressed_model.maps().combine(rows, &weights);
    let p = compressed.height * compressed.width;
    let mut data = vec![Complex::new(T::zero(), T::zero()); rows * p];
    for r in 0..rows {
        let out = &mut data[r * p..(r + 1) * p];
        for v in 0..l {
            let w = weights[r * l + v];
            if w.re == T::zero() {
                continue;
            }
            for (o, s) in out.iter_mut().zip(compressed.coil(v)) {
                *o += w * s;
            }
        }
    }
    let y = KSpaceStack::new(rows, compressed.mask.clone(), data)?;
    Ok(SketchedModel {
        model: MeasurementModel::Mri(compressed_model.with_maps(maps)?),
        y: y.to_interleaved(),
        label: SketchLabel::CoilSketch {
            keep_high: sketch.keep_high,
            sketched_low: sketch.sketched_low,
        },
    })
}

/// Uniformly selects `n_keep` distinct physical coils (sorted) and restricts
/// the model and data to them.
pub fn classical_coil_sketch<T: Real, R: Rng + ?Sized>(
    model: &MriModel<T>,
    k: &KSpaceStack<T>,
    n_keep: usize,
    rng: &mut R,
) -> Result<SketchedModel<T>> {
    let c = model.n_coils();
    if n_keep == 0 || n_keep > c {
        return Err(Error::config("n_keep", format!("must lie in 1..={c}")));
    }
    let mut coils = index::sample(rng, c, n_keep).into_vec();
    coils.sort_unstable();
    let maps = model.maps().select(&coils);
    let p = k.height * k.width;
    let mut data = Vec::with_capacity(n_keep * p);
    for &coil in &coils {
        data.extend_from_slice(k.coil(coil));
    }
    let y = KSpaceStack::new(n_keep, k.mask.clone(), data)?;
    Ok(SketchedModel {
        model: MeasurementModel::Mri(model.with_maps(maps)?),
        y: y.to_interleaved(),
        label: SketchLabel::Coils(coils),
    })
}

/// Source of coil sensitivities for the virtual coils.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum SensitivityProvider {
    /// Physical maps are known; they are rotated into the virtual basis.
    #[default]
    Known,
    /// Low-resolution estimate from the central autocalibration region,
    /// normalized by the root-sum-of-squares over coils.
    Calibration { acs_lines: usize },
}

/// Estimates per-coil maps from the central `acs_lines x acs_lines` block
/// of k-space.
pub fn estimate_maps_from_acs<T: Real>(k: &KSpaceStack<T>, acs_lines: usize) -> Result<CoilMaps<T>> {
    if acs_lines == 0 {
        return Err(Error::config("acs_lines", "must be positive"));
    }
    let (h, w) = (k.height, k.width);
    let half = (acs_lines / 2) as isize;
    let (lo, hi) = (-half, acs_lines as isize - half);
    let fft = Fft2::new(h, w);
    let p = h * w;
    let mut data = Vec::with_capacity(k.n_coils * p);
    for c in 0..k.n_coils {
        let mut plane: Vec<Complex<T>> = k
            .coil(c)
            .iter()
            .enumerate()
            .map(|(idx, &v)| {
                let (fi, fj) = (signed_freq(idx / w, h), signed_freq(idx % w, w));
                if (lo..hi).contains(&fi) && (lo..hi).contains(&fj) {
                    v
                } else {
                    Complex::new(T::zero(), T::zero())
                }
            })
            .collect();
        fft.inverse(&mut plane);
        data.extend(plane);
    }
    let rss: Vec<T> = (0..p)
        .map(|px| (0..k.n_coils).map(|c| data[c * p + px].norm_sqr()).sum::<T>().sqrt())
        .collect();
    let peak = rss.iter().copied().fold(T::zero(), T::max);
    if peak <= T::zero() {
        return Err(Error::Data("calibration region carries no signal".into()));
    }
    let floor = peak * T::lit(1e-3);
    for c in 0..k.n_coils {
        for px in 0..p {
            data[c * p + px] = data[c * p + px] / rss[px].max(floor);
        }
    }
    CoilMaps::new(k.n_coils, h, w, data)
}
