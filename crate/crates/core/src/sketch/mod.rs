//! Sketch operators: angle partitions, coil compression and sketching, and
//! dense random sketches.

pub mod coil;
pub mod dense;
pub mod partition;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linops::MeasurementModel;
use crate::scalar::Real;

pub use coil::{
    build_coil_sketch_matrix, classical_coil_sketch, coil_compress, estimate_maps_from_acs, sketch_mri_model,
    CoilCompression, CoilSketch, SensitivityProvider,
};
pub use dense::{make_gaussian_sketch, make_rademacher_sketch, Matrix};
pub use partition::{make_angle_partition, restrict_model, sample_batch, selection_matrix, AnglePartition};

/// Which realization a sketched model came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SketchLabel {
    Full,
    AngleBatch(usize),
    Coils(Vec<usize>),
    CoilSketch { keep_high: usize, sketched_low: usize },
}

/// A sketched operator pair `(A_S, A_S†)` with its sketched data `y_S`.
#[derive(Clone)]
pub struct SketchedModel<T: Real> {
    pub model: MeasurementModel<T>,
    pub y: Vec<T>,
    pub label: SketchLabel,
}

impl<T: Real> SketchedModel<T> {
    /// The unsketched model itself.
    pub fn full(model: MeasurementModel<T>, y: Vec<T>) -> Self {
        Self {
            model,
            y,
            label: SketchLabel::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SketchKind {
    AnglePartition { n_batches: usize },
    ClassicalCoil { n_keep: usize },
    CoilSketch { l: usize, r: usize, s: usize },
    Gaussian { m: usize },
    RademacherDense { m: usize },
}

/// Declarative sketch family plus the seed of its sampling stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchPlan {
    #[serde(flatten)]
    pub kind: SketchKind,
    pub seed: u64,
    /// Scale subsampling sketches so that `E[SᵀS] = I`. Training losses use
    /// plain row selection.
    #[serde(default)]
    pub isotropic: bool,
}

impl SketchPlan {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::config(name, "must be positive"))
            } else {
                Ok(())
            }
        };
        match self.kind {
            SketchKind::AnglePartition { n_batches } => positive("n_batches", n_batches),
            SketchKind::ClassicalCoil { n_keep } => positive("n_keep", n_keep),
            SketchKind::CoilSketch { l, r, s } => {
                positive("L", l)?;
                if r + s == 0 {
                    return Err(Error::config("R + S", "must be positive"));
                }
                if r + s > l {
                    return Err(Error::config("R + S", format!("R + S = {} exceeds L = {l}", r + s)));
                }
                Ok(())
            }
            SketchKind::Gaussian { m } | SketchKind::RademacherDense { m } => positive("m", m),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_serializes_with_kind_tag() {
        let plan = SketchPlan {
            kind: SketchKind::CoilSketch { l: 8, r: 2, s: 2 },
            seed: 7,
            isotropic: false,
        };
        let json = serde_json::to_string(&plan).unwrap();
        assert!(json.contains("\"kind\":\"coil-sketch\""));
        let back: SketchPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
        plan.validate().unwrap();
        let bad = SketchPlan {
            kind: SketchKind::CoilSketch { l: 3, r: 2, s: 2 },
            ..plan
        };
        assert!(bad.validate().is_err());
    }
}
