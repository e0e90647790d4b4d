//! Turns an [`ExperimentConfig`] plus optional external data into a problem,
//! a network and a finished run.

use crate::config::{AdaptationMode, ExperimentConfig, Method, MriSketch, Task};
use crate::error::{Error, Result};
use crate::groupact::RotationGroup;
use crate::image::{axpy, Image};
use crate::linops::{CoilMaps, CtModel, KSpaceStack, LinearModel, MeasurementModel, MriModel, SamplingMask};
use crate::nn::{load_checkpoint, Network, ParameterSelector};
use crate::objectives::draw_noise;
use crate::phantom::{complex_phantom, make_phantom, random_ellipses, synthetic_coil_maps};
use crate::scalar::Real;
use crate::trainer::{
    coil_sketched_problem, pretrain_supervised, stream_rng, train, CoilPipeline, IterRecord, Objective, Problem,
    RunStatus, Sketcher, Stream, TrainRun, TrainSettings,
};

/// Data loaded from disk by the caller. Anything missing is synthesized.
#[derive(Clone, Debug, Default)]
pub struct Inputs<T> {
    /// Ground truth, single channel for CT and MRI magnitude alike.
    pub image: Option<Image<T>>,
    /// Interleaved complex k-space `[coils, h, w]`.
    pub kspace: Option<Vec<T>>,
    pub maps: Option<CoilMaps<T>>,
}

pub struct Outcome<T: Real> {
    pub network: Network<T>,
    pub run: TrainRun<T>,
    pub problem: Problem<T>,
}

fn noisy<T: Real>(mut y: Vec<T>, sigma: f64, seed: u64) -> Vec<T> {
    if sigma > 0.0 {
        let e = draw_noise::<T, _>(y.len(), sigma, &mut stream_rng(seed, Stream::Measurement));
        axpy(&mut y, T::one(), &e);
    }
    y
}

fn ground_truth<T: Real>(cfg: &ExperimentConfig, inputs: &Inputs<T>) -> Result<Image<T>> {
    let img = match &inputs.image {
        Some(img) => {
            if img.height() != cfg.image_size || img.width() != cfg.image_size || img.channels() != 1 {
                return Err(Error::shape(format!(
                    "input image is {:?}, expected 1x{s}x{s}",
                    img.shape(),
                    s = cfg.image_size
                )));
            }
            img.clone()
        }
        None => make_phantom(cfg.phantom, cfg.image_size)?,
    };
    Ok(img)
}

/// The MRI operator for a config: maps and a Cartesian mask.
pub fn mri_model<T: Real>(cfg: &ExperimentConfig, inputs: &Inputs<T>) -> Result<MriModel<T>> {
    let m = cfg.mri();
    let n = cfg.image_size;
    let maps = match &inputs.maps {
        Some(maps) => maps.clone(),
        None => synthetic_coil_maps(m.n_coils, n, n),
    };
    if maps.n_coils != m.n_coils {
        return Err(Error::config(
            "mri.n_coils",
            format!("maps have {} coils", maps.n_coils),
        ));
    }
    let mask = SamplingMask::cartesian(n, n, m.acceleration, m.acs_lines)?;
    MriModel::new(maps, mask)
}

/// Builds the measurement, `z`, reference and sketcher for a run.
pub fn build_problem<T: Real>(cfg: &ExperimentConfig, inputs: &Inputs<T>) -> Result<Problem<T>> {
    match cfg.task {
        Task::Ct => {
            let ct = cfg.ct();
            let x = ground_truth(cfg, inputs)?;
            let model = CtModel::<T>::uniform(cfg.image_size, ct.n_angles, ct.filter)?;
            let y = noisy(model.forward(&x), cfg.measurement_noise, cfg.seed);
            let p = Problem::new(MeasurementModel::Ct(model), y, Some(x))?;
            match cfg.method {
                Method::SketchedEi => p.with_angle_batches(ct.n_batches),
                _ => Ok(p),
            }
        }
        Task::Mri => {
            let m = cfg.mri();
            let model = mri_model(cfg, inputs)?;
            let (kspace, reference) = match &inputs.kspace {
                Some(flat) => {
                    let k = KSpaceStack::from_interleaved(m.n_coils, model.mask().clone(), flat)?;
                    let reference = inputs.image.as_ref().map(complex_phantom);
                    (k, reference)
                }
                None => {
                    let x = complex_phantom(&ground_truth(cfg, inputs)?);
                    let y = noisy(model.forward(&x), cfg.measurement_noise, cfg.seed);
                    (
                        KSpaceStack::from_interleaved(m.n_coils, model.mask().clone(), &y)?,
                        Some(x),
                    )
                }
            };
            let sketch = if cfg.method == Method::SketchedEi {
                m.sketch.clone()
            } else {
                MriSketch::None
            };
            match sketch {
                MriSketch::None => Problem::new(MeasurementModel::Mri(model), kspace.to_interleaved(), reference),
                MriSketch::CoilSketch { l, r, s, sensitivity } => {
                    let pipeline = CoilPipeline { l, r, s, sensitivity };
                    coil_sketched_problem(&model, &kspace, reference, &pipeline, cfg.seed)
                }
                MriSketch::Classical { n_keep } => {
                    Problem::new(MeasurementModel::Mri(model), kspace.to_interleaved(), reference)?
                        .with_sketcher(Sketcher::Coils { kspace, n_keep })
                }
            }
        }
    }
}

/// Fresh or checkpointed network, checked against the configured architecture.
pub fn build_network<T: Real>(cfg: &ExperimentConfig) -> Result<Network<T>> {
    let arch = cfg.architecture();
    let mut net = match &cfg.mode {
        AdaptationMode::Scratch => Network::new(&arch, &mut stream_rng(cfg.seed, Stream::Init))?,
        AdaptationMode::NaFull { checkpoint } | AdaptationMode::NaBn { checkpoint } => {
            let net = load_checkpoint::<T>(checkpoint)?;
            if cfg.network.is_some() && net.architecture() != &arch {
                return Err(Error::Load(format!(
                    "checkpoint {} holds {:?}, config asks for {:?}",
                    checkpoint.display(),
                    net.architecture(),
                    arch
                )));
            }
            net
        }
    };
    net.norm_mode = cfg.norm_mode;
    Ok(net)
}

pub fn train_settings(cfg: &ExperimentConfig) -> Result<TrainSettings> {
    Ok(TrainSettings {
        objective: if cfg.method == Method::Dip {
            Objective::Dip
        } else {
            Objective::Ei
        },
        lambda: cfg.loss.lambda,
        rei_sigma: if cfg.loss.rei { cfg.loss.noise_sigma } else { 0.0 },
        optimizer: cfg.optimizer.clone(),
        selector: match cfg.mode {
            AdaptationMode::NaBn { .. } => ParameterSelector::BnOnly,
            _ => ParameterSelector::Full,
        },
        group: RotationGroup::new(cfg.group_order)?,
        seed: cfg.seed,
        early_stopping: cfg.early_stopping.clone(),
        psnr_peak: cfg.psnr_peak,
    })
}

/// Random training images and the source operator used for pretraining.
pub fn pretrain_set<T: Real>(
    cfg: &ExperimentConfig,
    inputs: &Inputs<T>,
) -> Result<(MeasurementModel<T>, Vec<Image<T>>)> {
    let pt = cfg.pretrain.clone().unwrap_or_default();
    let mut rng = stream_rng(cfg.seed, Stream::Data);
    let n = cfg.image_size;
    let mags: Vec<Image<T>> = (0..pt.n_images).map(|_| random_ellipses(n, 8, &mut rng)).collect();
    Ok(match cfg.task {
        Task::Ct => {
            let ct = cfg.ct();
            let views = pt.n_angles.unwrap_or(ct.n_angles);
            (MeasurementModel::Ct(CtModel::uniform(n, views, ct.filter)?), mags)
        }
        Task::Mri => (
            MeasurementModel::Mri(mri_model(cfg, inputs)?),
            mags.iter().map(complex_phantom).collect(),
        ),
    })
}

/// Runs the configured method end to end.
pub fn run_experiment<T: Real>(
    cfg: &ExperimentConfig,
    inputs: &Inputs<T>,
    progress: &mut dyn FnMut(&IterRecord),
) -> Result<Outcome<T>> {
    cfg.validate()?;
    let problem = build_problem(cfg, inputs)?;
    let mut network = build_network::<T>(cfg)?;
    let run = if cfg.method == Method::Pretrain {
        let (model, images) = pretrain_set(cfg, inputs)?;
        let noise = cfg.pretrain.clone().unwrap_or_default().noise_sigma;
        let records = pretrain_supervised(&mut network, &model, &images, noise, &cfg.optimizer, cfg.seed, progress)?;
        let reconstruction = network.forward(&problem.z)?;
        let final_psnr = problem
            .reference
            .as_ref()
            .map(|r| crate::analysis::image_psnr(&reconstruction, r, cfg.psnr_peak));
        TrainRun {
            records,
            status: RunStatus::Completed,
            reconstruction,
            final_psnr,
            trainable_params: network.param_count(),
            total_params: network.param_count(),
        }
    } else {
        train(&mut network, &problem, &train_settings(cfg)?, progress)?
    };
    Ok(Outcome { network, run, problem })
}
