//! Experiment configuration (JSON). Unknown keys are rejected everywhere.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linops::FbpFilter;
use crate::nn::{Architecture, NormMode};
use crate::optim::OptimizerConfig;
use crate::phantom::PhantomKind;
use crate::sketch::SensitivityProvider;
use crate::trainer::EarlyStopping;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Ct,
    Mri,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Dip,
    Ei,
    #[default]
    SketchedEi,
    /// Supervised training on random phantoms; produces a checkpoint for
    /// the adaptation modes.
    Pretrain,
}

fn d_angles() -> usize {
    50
}
fn d_batches() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CtConfig {
    #[serde(default = "d_angles")]
    pub n_angles: usize,
    /// Angle-partition size N for sketched EI.
    #[serde(default = "d_batches")]
    pub n_batches: usize,
    #[serde(default)]
    pub filter: FbpFilter,
}

impl Default for CtConfig {
    fn default() -> Self {
        Self {
            n_angles: d_angles(),
            n_batches: d_batches(),
            filter: FbpFilter::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum MriSketch {
    /// Full physical-coil operator.
    #[default]
    None,
    /// Compress to `l` virtual coils, keep `r`, mix the rest into `s` rows.
    CoilSketch {
        l: usize,
        r: usize,
        s: usize,
        #[serde(default)]
        sensitivity: SensitivityProvider,
    },
    /// Fresh random subset of `n_keep` physical coils every iteration.
    Classical { n_keep: usize },
}

fn d_coils() -> usize {
    8
}
fn d_accel() -> usize {
    4
}
fn d_acs() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MriConfig {
    #[serde(default = "d_coils")]
    pub n_coils: usize,
    #[serde(default = "d_accel")]
    pub acceleration: usize,
    /// Fully sampled central columns.
    #[serde(default = "d_acs")]
    pub acs_lines: usize,
    #[serde(default)]
    pub sketch: MriSketch,
    /// Raw-array k-space `[coils, h, w]`, complex interleaved.
    #[serde(default)]
    pub kspace_path: Option<PathBuf>,
    /// Raw-array sensitivities `[coils, h, w]`, complex interleaved.
    #[serde(default)]
    pub maps_path: Option<PathBuf>,
}

impl Default for MriConfig {
    fn default() -> Self {
        Self {
            n_coils: d_coils(),
            acceleration: d_accel(),
            acs_lines: d_acs(),
            sketch: MriSketch::None,
            kspace_path: None,
            maps_path: None,
        }
    }
}

fn d_lambda() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    /// Noise level injected inside the EI term when `rei` is set.
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub rei: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: d_lambda(),
            noise_sigma: 0.0,
            rei: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum AdaptationMode {
    #[default]
    Scratch,
    /// Start from a checkpoint, train every parameter.
    NaFull { checkpoint: PathBuf },
    /// Start from a checkpoint, train only normalization scale/shift.
    NaBn { checkpoint: PathBuf },
}

fn d_images() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "d_images")]
    pub n_images: usize,
    /// Measurement noise on the training pairs.
    #[serde(default)]
    pub noise_sigma: f64,
    /// CT view count of the source operator; defaults to the task's.
    #[serde(default)]
    pub n_angles: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            n_images: d_images(),
            noise_sigma: 0.0,
            n_angles: None,
        }
    }
}

fn d_size() -> usize {
    128
}
fn d_group() -> u32 {
    360
}
fn d_out() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default = "d_size")]
    pub image_size: usize,
    #[serde(default)]
    pub phantom: PhantomKind,
    /// Ground-truth image (PNG) replacing the phantom.
    #[serde(default)]
    pub image_path: Option<PathBuf>,
    #[serde(default)]
    pub ct: Option<CtConfig>,
    #[serde(default)]
    pub mri: Option<MriConfig>,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Defaults to a small U-Net sized for CPU runs.
    #[serde(default)]
    pub network: Option<Architecture>,
    #[serde(default)]
    pub mode: AdaptationMode,
    #[serde(default = "d_group")]
    pub group_order: u32,
    #[serde(default)]
    pub seed: u64,
    /// Standard deviation of additive Gaussian noise on the measurement.
    #[serde(default)]
    pub measurement_noise: f64,
    #[serde(default)]
    pub early_stopping: Option<EarlyStopping>,
    /// PSNR peak; the reference maximum when absent.
    #[serde(default)]
    pub psnr_peak: Option<f64>,
    #[serde(default)]
    pub norm_mode: NormMode,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    /// Must be set for full-size runs (≥ 512² or ≥ 5000 iterations).
    #[serde(default)]
    pub paper_scale: bool,
    #[serde(default = "d_out")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Desk-scale CT default: 128², 50 views, N = 5, 1500 iterations.
    pub fn desk_ct() -> Self {
        serde_json::from_str(r#"{"task":"ct"}"#).expect("static config")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.fill_defaults();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn channels(&self) -> usize {
        match self.task {
            Task::Ct => 1,
            Task::Mri => 2,
        }
    }

    /// Makes the active task block explicit and resolves the network.
    pub fn fill_defaults(&mut self) {
        match self.task {
            Task::Ct if self.ct.is_none() && self.mri.is_none() => self.ct = Some(CtConfig::default()),
            Task::Mri if self.mri.is_none() && self.ct.is_none() => self.mri = Some(MriConfig::default()),
            _ => {}
        }
        if self.network.is_none() {
            self.network = Some(Architecture::UNet {
                channels: self.channels(),
                base_width: 8,
                depth: 4,
                residual: true,
            });
        }
    }

    pub fn ct(&self) -> CtConfig {
        self.ct.clone().unwrap_or_default()
    }

    pub fn mri(&self) -> MriConfig {
        self.mri.clone().unwrap_or_default()
    }

    pub fn architecture(&self) -> Architecture {
        self.network.clone().unwrap_or(Architecture::UNet {
            channels: self.channels(),
            base_width: 8,
            depth: 4,
            residual: true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::config("image_size", "must be at least 16"));
        }
        match self.task {
            Task::Ct => {
                if self.mri.is_some() {
                    return Err(Error::config("mri", "block given for a CT task"));
                }
                let ct = self.ct();
                if ct.n_angles == 0 {
                    return Err(Error::config("ct.n_angles", "must be positive"));
                }
                if ct.n_batches == 0 || ct.n_batches > ct.n_angles {
                    return Err(Error::config(
                        "n_batches",
                        format!("must lie in 1..={} (the view count)", ct.n_angles),
                    ));
                }
            }
            Task::Mri => {
                if self.ct.is_some() {
                    return Err(Error::config("ct", "block given for an MRI task"));
                }
                let mri = self.mri();
                if mri.n_coils == 0 {
                    return Err(Error::config("mri.n_coils", "must be positive"));
                }
                if mri.acceleration == 0 {
                    return Err(Error::config("mri.acceleration", "must be positive"));
                }
                if mri.acs_lines > self.image_size {
                    return Err(Error::config("mri.acs_lines", "exceeds the image width"));
                }
                match mri.sketch {
                    MriSketch::None => {}
                    MriSketch::CoilSketch {
                        l,
                        r,
                        s,
                        ref sensitivity,
                    } => {
                        if l == 0 || l > mri.n_coils {
                            return Err(Error::config("L", format!("must lie in 1..={}", mri.n_coils)));
                        }
                        if r + s == 0 || r + s > l {
                            return Err(Error::config("R + S", format!("must lie in 1..={l}")));
                        }
                        if let SensitivityProvider::Calibration { acs_lines } = sensitivity {
                            if *acs_lines == 0 || *acs_lines > self.image_size {
                                return Err(Error::config("sensitivity.acs_lines", "out of range"));
                            }
                        }
                    }
                    MriSketch::Classical { n_keep } => {
                        if n_keep == 0 || n_keep > mri.n_coils {
                            return Err(Error::config("n_keep", format!("must lie in 1..={}", mri.n_coils)));
                        }
                    }
                }
            }
        }
        self.optimizer.validate()?;
        let arch = self.architecture();
        arch.validate()?;
        if arch.channels() != self.channels() {
            return Err(Error::config(
                "network.channels",
                format!("{:?} images have {} channels", self.task, self.channels()),
            ));
        }
        if !(self.loss.lambda >= 0.0 && self.loss.lambda.is_finite()) {
            return Err(Error::config("loss.lambda", "must be non-negative"));
        }
        if !(self.loss.noise_sigma >= 0.0) {
            return Err(Error::config("loss.noise_sigma", "must be non-negative"));
        }
        if !(self.measurement_noise >= 0.0) {
            return Err(Error::config("measurement_noise", "must be non-negative"));
        }
        if self.group_order == 0 {
            return Err(Error::config("group_order", "must be positive"));
        }
        if let Some(p) = self.psnr_peak {
            if !(p > 0.0) {
                return Err(Error::config("psnr_peak", "must be positive"));
            }
        }
        if let Some(pt) = &self.pretrain {
            if pt.n_images == 0 {
                return Err(Error::config("pretrain.n_images", "must be positive"));
            }
            if pt.n_angles == Some(0) {
                return Err(Error::config("pretrain.n_angles", "must be positive"));
            }
        }
        if self.method == Method::Pretrain && self.mode != AdaptationMode::Scratch {
            return Err(Error::config("mode", "pretraining starts from scratch"));
        }
        if (self.image_size >= 512 || self.optimizer.iterations >= 5000) && !self.paper_scale {
            return Err(Error::config(
                "paper_scale",
                "runs at >= 512² or >= 5000 iterations must set paper_scale: true",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_ct_config_gets_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"task":"ct"}"#).unwrap();
        assert_eq!(cfg.loss.lambda, 1.0);
        assert_eq!(cfg.optimizer.learning_rate, 5e-4);
        assert_eq!(cfg.optimizer.iterations, 1500);
        assert_eq!(cfg.image_size, 128);
        assert_eq!(cfg.ct().n_angles, 50);
        assert_eq!(cfg.ct().n_batches, 5);
        assert_eq!(cfg.method, Method::SketchedEi);
        assert_eq!(cfg.group_order, 360);
    }

    #[test]
    fn validation_names_the_field() {
        let err = ExperimentConfig::from_json(r#"{"task":"ct","ct":{"n_angles":10,"n_batches":11}}"#).unwrap_err();
        assert!(err.to_string().contains("n_batches"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"task":"ct","bogus":1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"task":"ct","ct":{"n_angle":10}}"#).unwrap_err();
        assert!(err.to_string().contains("n_angle"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"task":"ct","mri":{}}"#).unwrap_err();
        assert!(err.to_string().contains("mri"), "{err}");
        let err = ExperimentConfig::from_json(
            r#"{"task":"mri","mri":{"n_coils":4,"sketch":{"kind":"coil-sketch","l":4,"r":3,"s":2}}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("R + S"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"task":"ct","image_size":512}"#).unwrap_err();
        assert!(err.to_string().contains("paper_scale"), "{err}");
        let err =
            ExperimentConfig::from_json(r#"{"task":"ct","network":{"kind":"identity","channels":2}}"#).unwrap_err();
        assert!(err.to_string().contains("network.channels"), "{err}");
    }

    #[test]
    fn round_trip_is_identical() {
        let text = r#"{"task":"mri","image_size":64,"mri":{"n_coils":8,"sketch":{"kind":"coil-sketch","l":4,"r":2,"s":2}},
            "mode":{"kind":"na-bn","checkpoint":"pre/net.ckpt"},"loss":{"lambda":0.5,"rei":true,"noise_sigma":0.01},
            "early_stopping":{"patience":20}}"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(ExperimentConfig::desk_ct().task, Task::Ct);
    }
}
