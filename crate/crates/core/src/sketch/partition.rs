//! Interleaved angle partitions: subsampling sketches for CT.

use rand::Rng;

use super::dense::Matrix;
use super::{SketchLabel, SketchedModel};
use crate::error::{Error, Result};
use crate::linops::{CtModel, MeasurementModel};
use crate::scalar::Real;

/// Disjoint interleaved cover of `0..n_angles`: batch `i` holds
/// `{i, i + N, i + 2N, ...}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnglePartition {
    pub n_angles: usize,
    pub batches: Vec<Vec<usize>>,
}

impl AnglePartition {
    pub fn n_batches(&self) -> usize {
        self.batches.len()
    }
}

pub fn make_angle_partition(n_angles: usize, n_batches: usize) -> Result<AnglePartition> {
    if n_batches == 0 {
        return Err(Error::config("n_batches", "must be at least 1"));
    }
    if n_batches > n_angles {
        return Err(Error::config(
            "n_batches",
            format!("{n_batches} batches exceed {n_angles} angles"),
        ));
    }
    let batches = (0..n_batches)
        .map(|i| (i..n_angles).step_by(n_batches).collect())
        .collect();
    Ok(AnglePartition { n_angles, batches })
}

/// Uniform batch index in `0..N`.
pub fn sample_batch<R: Rng + ?Sized>(partition: &AnglePartition, rng: &mut R) -> usize {
    rng.random_range(0..partition.n_batches())
}

/// Sinogram rows of one batch, taken from a flat `n_angles x n_det` buffer.
pub fn restrict_rows<T: Real>(y: &[T], n_detectors: usize, rows: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len() * n_detectors);
    for &r in rows {
        out.extend_from_slice(&y[r * n_detectors..(r + 1) * n_detectors]);
    }
    out
}

/// Restricts a CT model and its sinogram to one batch of the partition.
pub fn restrict_model<T: Real>(
    model: &CtModel<T>,
    y: &[T],
    partition: &AnglePartition,
    batch: usize,
) -> Result<SketchedModel<T>> {
    if partition.n_angles != model.n_angles() {
        return Err(Error::shape(format!(
            "partition covers {} angles but the model has {}",
            partition.n_angles,
            model.n_angles()
        )));
    }
    let rows = partition
        .batches
        .get(batch)
        .ok_or_else(|| Error::config("batch", format!("batch {batch} out of range")))?;
    Ok(SketchedModel {
        model: MeasurementModel::Ct(model.subset(rows)?),
        y: restrict_rows(y, model.n_detectors(), rows),
        label: SketchLabel::AngleBatch(batch),
    })
}

/// Row-selection matrix of one batch over `n` rows. With `isotropic` the
/// selection is scaled by `sqrt(N)` so that uniform batch sampling gives
/// `E[SᵀS] = I`.
pub fn selection_matrix<T: Real>(partition: &AnglePartition, batch: usize, isotropic: bool) -> Matrix<T> {
    let rows = &partition.batches[batch];
    let scale = if isotropic {
        T::from_usize_lossy(partition.n_batches()).sqrt()
    } else {
        T::one()
    };
    let mut s = Matrix::zeros(rows.len(), partition.n_angles);
    for (r, &k) in rows.iter().enumerate() {
        s.set(r, k, scale);
    }
    s
}
