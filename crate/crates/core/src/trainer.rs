//! Training and adaptation loops.
//!
//! Every loop is the same: draw a sketch and a group element, evaluate the
//! loss with gradients, take one Adam step on the selected parameters. What
//! differs is the sketcher, the loss and the parameter selection.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::image_psnr;
use crate::error::{Error, Result};
use crate::groupact::RotationGroup;
use crate::image::Image;
use crate::linops::{KSpaceStack, LinearModel, MeasurementModel, MriModel};
use crate::nn::{Network, ParameterSelector};
use crate::objectives::{draw_noise, evaluate, EiTerm, LossBreakdown};
use crate::optim::{Adam, OptimizerConfig};
use crate::scalar::Real;
use crate::sketch::{
    build_coil_sketch_matrix, classical_coil_sketch, coil_compress, estimate_maps_from_acs, make_angle_partition,
    restrict_model, sample_batch, sketch_mri_model, AnglePartition, SensitivityProvider, SketchedModel,
};

/// Independent random streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Sketch = 1,
    Group = 2,
    Noise = 3,
    Measurement = 4,
    Data = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// How the per-iteration operator `(A_S, y_S)` is obtained.
#[derive(Clone)]
pub enum Sketcher<T: Real> {
    /// The full operator every iteration.
    Full,
    /// A uniformly drawn batch of an angle partition (CT only).
    Angles(AnglePartition),
    /// A sketch drawn once before training.
    Fixed(SketchedModel<T>),
    /// A fresh uniform subset of physical coils every iteration.
    Coils { kspace: KSpaceStack<T>, n_keep: usize },
}

/// Everything a loop needs about the measurement.
#[derive(Clone)]
pub struct Problem<T: Real> {
    pub model: MeasurementModel<T>,
    pub y: Vec<T>,
    /// Network input, computed once from the full model.
    pub z: Image<T>,
    pub reference: Option<Image<T>>,
    pub sketcher: Sketcher<T>,
}

impl<T: Real> Problem<T> {
    pub fn new(model: MeasurementModel<T>, y: Vec<T>, reference: Option<Image<T>>) -> Result<Self> {
        if y.len() != model.measurement_len() {
            return Err(Error::shape(format!(
                "measurement has {} values, model expects {}",
                y.len(),
                model.measurement_len()
            )));
        }
        let z = model.pinv(&y);
        Ok(Self {
            model,
            y,
            z,
            reference,
            sketcher: Sketcher::Full,
        })
    }

    pub fn with_sketcher(mut self, sketcher: Sketcher<T>) -> Result<Self> {
        match (&sketcher, &self.model) {
            (Sketcher::Angles(p), MeasurementModel::Ct(ct)) if p.n_angles != ct.n_angles() => {
                return Err(Error::config("n_batches", "partition does not match the angle count"));
            }
            (Sketcher::Angles(_), MeasurementModel::Mri(_)) => {
                return Err(Error::config("sketch", "angle partitions need a CT model"));
            }
            (Sketcher::Coils { .. }, MeasurementModel::Ct(_)) => {
                return Err(Error::config("sketch", "coil subsets need an MRI model"));
            }
            _ => {}
        }
        self.sketcher = sketcher;
        Ok(self)
    }

    /// CT problem with an interleaved angle partition into `n_batches`.
    pub fn with_angle_batches(self, n_batches: usize) -> Result<Self> {
        let MeasurementModel::Ct(ct) = &self.model else {
            return Err(Error::config("sketch", "angle partitions need a CT model"));
        };
        let p = make_angle_partition(ct.n_angles(), n_batches)?;
        self.with_sketcher(Sketcher::Angles(p))
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<Option<SketchedModel<T>>> {
        Ok(match &self.sketcher {
            Sketcher::Full => None,
            Sketcher::Angles(p) => {
                let MeasurementModel::Ct(ct) = &self.model else {
                    unreachable!("checked")
                };
                let b = sample_batch(p, rng);
                Some(restrict_model(ct, &self.y, p, b)?)
            }
            Sketcher::Fixed(s) => Some(s.clone()),
            Sketcher::Coils { kspace, n_keep } => {
                let MeasurementModel::Mri(m) = &self.model else {
                    unreachable!("checked")
                };
                Some(classical_coil_sketch(m, kspace, *n_keep, rng)?)
            }
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Measurement consistency only.
    Dip,
    /// Measurement consistency plus the equivariance term.
    #[default]
    Ei,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopping {
    /// Iterations without improvement of the MC loss before stopping.
    pub patience: usize,
    /// Relative improvement that counts.
    #[serde(default)]
    pub min_delta: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub objective: Objective,
    pub lambda: f64,
    /// Noise injected inside the EI term (REI); 0 disables.
    pub rei_sigma: f64,
    pub optimizer: OptimizerConfig,
    pub selector: ParameterSelector,
    pub group: RotationGroup,
    pub seed: u64,
    pub early_stopping: Option<EarlyStopping>,
    pub psnr_peak: Option<f64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            objective: Objective::Ei,
            lambda: 1.0,
            rei_sigma: 0.0,
            optimizer: OptimizerConfig::default(),
            selector: ParameterSelector::Full,
            group: RotationGroup::default(),
            seed: 0,
            early_stopping: None,
            psnr_peak: None,
        }
    }
}

/// One row of the metrics table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub wall_time_s: f64,
    pub mc: f64,
    pub ei: f64,
    pub total: f64,
    pub psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status")]
pub enum RunStatus {
    Completed,
    EarlyStopped { iteration: usize },
    Aborted { iteration: usize, reason: String },
}

#[derive(Clone, Debug)]
pub struct TrainRun<T> {
    pub records: Vec<IterRecord>,
    pub status: RunStatus,
    /// `F_θ*(z)` after the last step.
    pub reconstruction: Image<T>,
    pub final_psnr: Option<f64>,
    pub trainable_params: usize,
    pub total_params: usize,
}

impl<T> TrainRun<T> {
    /// Mean wall time per iteration.
    pub fn seconds_per_iter(&self) -> f64 {
        match self.records.last() {
            Some(r) => r.wall_time_s / self.records.len() as f64,
            None => 0.0,
        }
    }
}

/// Runs the loop. `progress` sees every record as it is produced.
pub fn train<T: Real>(
    net: &mut Network<T>,
    problem: &Problem<T>,
    settings: &TrainSettings,
    progress: &mut dyn FnMut(&IterRecord),
) -> Result<TrainRun<T>> {
    settings.optimizer.validate()?;
    if !(settings.lambda >= 0.0) {
        return Err(Error::config("loss.lambda", "must be non-negative"));
    }
    if !(settings.rei_sigma >= 0.0) {
        return Err(Error::config("loss.noise_sigma", "must be non-negative"));
    }
    if net.architecture().channels() != problem.z.channels() {
        return Err(Error::config(
            "network.channels",
            format!(
                "network has {} channels, images have {}",
                net.architecture().channels(),
                problem.z.channels()
            ),
        ));
    }
    let ranges = settings.selector.ranges(net.params())?;
    let mut adam = Adam::<T>::new(net.param_count(), ranges, &settings.optimizer);
    let mut sketch_rng = stream_rng(settings.seed, Stream::Sketch);
    let mut group_rng = stream_rng(settings.seed, Stream::Group);
    let mut noise_rng = stream_rng(settings.seed, Stream::Noise);

    let mut records = Vec::with_capacity(settings.optimizer.iterations);
    let mut grads = vec![T::zero(); net.param_count()];
    let mut status = RunStatus::Completed;
    let mut best_mc = f64::INFINITY;
    let mut since_best = 0usize;
    let start = Instant::now();

    for it in 0..settings.optimizer.iterations {
        let sk = problem.draw(&mut sketch_rng)?;
        let (model, y): (&dyn LinearModel<T>, &[T]) = match &sk {
            Some(s) => (&s.model, &s.y),
            None => (&problem.model, &problem.y),
        };
        let g = settings.group.sample(&mut group_rng);
        let eps = (settings.objective == Objective::Ei && settings.rei_sigma > 0.0)
            .then(|| draw_noise::<T, _>(model.measurement_len(), settings.rei_sigma, &mut noise_rng));
        let term = EiTerm {
            group: settings.group,
            g,
            lambda: settings.lambda,
            noise: eps.as_deref(),
        };
        let ei = (settings.objective == Objective::Ei).then_some(&term);

        grads.iter_mut().for_each(|v| *v = T::zero());
        let eval = evaluate(net, &problem.z, y, model, ei, Some(&mut grads))?;
        let loss: LossBreakdown = eval.loss;
        if !loss.is_finite() || grads.iter().any(|v| !v.is_finite()) {
            status = RunStatus::Aborted {
                iteration: it,
                reason: format!("non-finite loss or gradient (mc={}, ei={})", loss.mc, loss.ei),
            };
            break;
        }
        adam.step(&mut net.params_mut().data, &grads);
        for tr in &eval.traces {
            net.update_running_stats(tr);
        }
        let wall = start.elapsed().as_secs_f64();
        let psnr = problem
            .reference
            .as_ref()
            .map(|r| image_psnr(&eval.x1, r, settings.psnr_peak));
        let rec = IterRecord {
            iter: it,
            wall_time_s: wall,
            mc: loss.mc,
            ei: loss.ei,
            total: loss.total,
            psnr,
        };
        progress(&rec);
        records.push(rec);

        if let Some(es) = &settings.early_stopping {
            if loss.mc < best_mc * (1.0 - es.min_delta) {
                best_mc = loss.mc;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= es.patience {
                    status = RunStatus::EarlyStopped { iteration: it };
                    break;
                }
            }
        }
    }

    let reconstruction = net.forward(&problem.z)?;
    let final_psnr = problem
        .reference
        .as_ref()
        .map(|r| image_psnr(&reconstruction, r, settings.psnr_peak));
    Ok(TrainRun {
        records,
        status,
        reconstruction,
        final_psnr,
        trainable_params: adam.trainable(),
        total_params: net.param_count(),
    })
}

/// Measurement consistency only (deep image prior).
pub fn run_dip<T: Real>(net: &mut Network<T>, problem: &Problem<T>, settings: &TrainSettings) -> Result<TrainRun<T>> {
    let s = TrainSettings {
        objective: Objective::Dip,
        ..settings.clone()
    };
    train(net, problem, &s, &mut |_| {})
}

/// Full EI: ignores any sketcher on the problem.
pub fn run_ei<T: Real>(net: &mut Network<T>, problem: &Problem<T>, settings: &TrainSettings) -> Result<TrainRun<T>> {
    let full = Problem {
        sketcher: Sketcher::Full,
        ..problem.clone()
    };
    let s = TrainSettings {
        objective: Objective::Ei,
        ..settings.clone()
    };
    train(net, &full, &s, &mut |_| {})
}

/// Sketched EI with the problem's sketcher.
pub fn run_sketched_ei<T: Real>(
    net: &mut Network<T>,
    problem: &Problem<T>,
    settings: &TrainSettings,
) -> Result<TrainRun<T>> {
    let s = TrainSettings {
        objective: Objective::Ei,
        ..settings.clone()
    };
    train(net, problem, &s, &mut |_| {})
}

/// Adapts only the normalization parameters of a pretrained network.
pub fn run_bn_adaptation<T: Real>(
    net: &mut Network<T>,
    problem: &Problem<T>,
    settings: &TrainSettings,
) -> Result<TrainRun<T>> {
    let s = TrainSettings {
        selector: ParameterSelector::BnOnly,
        ..settings.clone()
    };
    train(net, problem, &s, &mut |_| {})
}

/// Coil handling for the multi-coil pipeline.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoilPipeline {
    /// Virtual coils kept after compression.
    pub l: usize,
    /// High-energy virtual coils kept exactly.
    pub r: usize,
    /// Rademacher-mixed rows for the remaining coils.
    pub s: usize,
    pub sensitivity: SensitivityProvider,
}

/// Compress → sensitivities → coil sketch (drawn once) → sketched problem.
/// `z` still comes from the full physical-coil model.
pub fn coil_sketched_problem<T: Real>(
    model: &MriModel<T>,
    kspace: &KSpaceStack<T>,
    reference: Option<Image<T>>,
    pipeline: &CoilPipeline,
    seed: u64,
) -> Result<Problem<T>> {
    let cc = coil_compress(kspace, pipeline.l)?;
    let vmaps = match &pipeline.sensitivity {
        SensitivityProvider::Known => cc.compress_maps(model.maps())?,
        SensitivityProvider::Calibration { acs_lines } => estimate_maps_from_acs(&cc.compressed, *acs_lines)?,
    };
    let vmodel = model.with_maps(vmaps)?;
    let mut rng = stream_rng(seed, Stream::Sketch);
    let sketch = build_coil_sketch_matrix(pipeline.l, pipeline.r, pipeline.s, &mut rng)?;
    let sk = sketch_mri_model(&vmodel, &cc.compressed, &sketch)?;
    Problem::new(MeasurementModel::Mri(model.clone()), kspace.to_interleaved(), reference)?
        .with_sketcher(Sketcher::Fixed(sk))
}

pub fn run_coil_sketched_ei<T: Real>(
    net: &mut Network<T>,
    model: &MriModel<T>,
    kspace: &KSpaceStack<T>,
    reference: Option<Image<T>>,
    pipeline: &CoilPipeline,
    settings: &TrainSettings,
) -> Result<TrainRun<T>> {
    let problem = coil_sketched_problem(model, kspace, reference, pipeline, settings.seed)?;
    run_sketched_ei(net, &problem, settings)
}

/// Supervised pretraining on `(image → A†(A image + noise))` pairs, one pair
/// per iteration drawn uniformly from `images`.
pub fn pretrain_supervised<T: Real>(
    net: &mut Network<T>,
    model: &dyn LinearModel<T>,
    images: &[Image<T>],
    noise_sigma: f64,
    optimizer: &OptimizerConfig,
    seed: u64,
    progress: &mut dyn FnMut(&IterRecord),
) -> Result<Vec<IterRecord>> {
    use rand::Rng;
    optimizer.validate()?;
    if images.is_empty() {
        return Err(Error::config("pretrain.n_images", "need at least one image"));
    }
    let inputs: Vec<Image<T>> = {
        let mut rng = stream_rng(seed, Stream::Measurement);
        images
            .iter()
            .map(|x| {
                let mut y = model.forward(x);
                if noise_sigma > 0.0 {
                    let e = draw_noise::<T, _>(y.len(), noise_sigma, &mut rng);
                    crate::image::axpy(&mut y, T::one(), &e);
                }
                model.pinv(&y)
            })
            .collect()
    };
    let mut adam = Adam::<T>::new(
        net.param_count(),
        ParameterSelector::Full.ranges(net.params())?,
        optimizer,
    );
    let mut rng = stream_rng(seed, Stream::Data);
    let mut grads = vec![T::zero(); net.param_count()];
    let mut records = Vec::with_capacity(optimizer.iterations);
    let start = Instant::now();
    for it in 0..optimizer.iterations {
        let k = rng.random_range(0..images.len());
        let (out, tr) = net.forward_trace(&inputs[k])?;
        let d = out.sub(&images[k]);
        let loss = d.norm_sq().as_f64();
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                reason: "non-finite supervised loss".into(),
            });
        }
        grads.iter_mut().for_each(|v| *v = T::zero());
        net.backward(&tr, &d.scaled(T::lit(2.0)), &mut grads);
        adam.step(&mut net.params_mut().data, &grads);
        net.update_running_stats(&tr);
        let rec = IterRecord {
            iter: it,
            wall_time_s: start.elapsed().as_secs_f64(),
            mc: loss,
            ei: 0.0,
            total: loss,
            psnr: Some(image_psnr(&out, &images[k], None)),
        };
        progress(&rec);
        records.push(rec);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageShape;
    use crate::linops::{CtModel, FbpFilter, IdentityModel};
    use crate::nn::Architecture;
    use crate::phantom::shepp_logan;

    fn settings(iters: usize, seed: u64) -> TrainSettings {
        TrainSettings {
            optimizer: OptimizerConfig {
                iterations: iters,
                learning_rate: 1e-3,
                ..Default::default()
            },
            seed,
            ..Default::default()
        }
    }

    fn ct_problem(size: usize, views: usize) -> Problem<f32> {
        let model = CtModel::<f32>::uniform(size, views, FbpFilter::RamLak).unwrap();
        let x = shepp_logan::<f32>(size);
        let y = model.forward(&x);
        Problem::new(MeasurementModel::Ct(model), y, Some(x)).unwrap()
    }

    fn net(arch: &Architecture, seed: u64) -> Network<f32> {
        Network::new(arch, &mut stream_rng(seed, Stream::Init)).unwrap()
    }

    #[test]
    fn dip_on_identity_operator_converges() {
        // A = I with a tiny linear net: ConvNet without norm, no ReLU in the way of
        // the residual path.
        let shape = ImageShape::new(1, 8, 8);
        let arch = Architecture::ConvNet {
            channels: 1,
            width: 8,
            layers: 2,
            batch_norm: false,
            residual: true,
        };
        let truth = Image::from_fn(shape, |_, i, j| ((i * 7 + j * 3) % 5) as f32 / 5.0);
        let y = truth.data().to_vec();
        let id = IdentityModel { shape };
        let mut n = net(&arch, 1);
        let mut adam = Adam::<f32>::new(
            n.param_count(),
            vec![0..n.param_count()],
            &OptimizerConfig {
                learning_rate: 0.02,
                ..Default::default()
            },
        );
        let z = truth.scaled(0.5);
        let mut grads = vec![0.0f32; n.param_count()];
        let first = evaluate(&n, &z, &y, &id, None, None).unwrap().loss.mc;
        for _ in 0..200 {
            grads.iter_mut().for_each(|v| *v = 0.0);
            evaluate(&n, &z, &y, &id, None, Some(&mut grads)).unwrap();
            adam.step(&mut n.params_mut().data, &grads);
        }
        let last = evaluate(&n, &z, &y, &id, None, None).unwrap().loss.mc;
        assert!(last < 0.01 * first, "{last} vs {first}");
    }

    #[test]
    fn reruns_are_identical_and_n1_matches_full_ei() {
        let arch = Architecture::UNet {
            channels: 1,
            base_width: 4,
            depth: 2,
            residual: true,
        };
        let p = ct_problem(32, 12);
        let a = run_ei(&mut net(&arch, 3), &p, &settings(15, 3)).unwrap();
        let b = run_ei(&mut net(&arch, 3), &p, &settings(15, 3)).unwrap();
        let c = run_sketched_ei(
            &mut net(&arch, 3),
            &p.clone().with_angle_batches(1).unwrap(),
            &settings(15, 3),
        )
        .unwrap();
        for ((x, y), z) in a.records.iter().zip(&b.records).zip(&c.records) {
            assert_eq!((x.mc, x.ei, x.psnr), (y.mc, y.ei, y.psnr));
            assert!((x.total - z.total).abs() <= 1e-6 * x.total.max(1.0));
        }
        assert_eq!(a.records.len(), 15);
        assert!(a.records.windows(2).all(|w| w[0].wall_time_s <= w[1].wall_time_s));
    }

    #[test]
    fn bn_adaptation_freezes_everything_else() {
        let arch = Architecture::UNet {
            channels: 1,
            base_width: 4,
            depth: 2,
            residual: true,
        };
        let p = ct_problem(32, 12).with_angle_batches(3).unwrap();
        let mut n = net(&arch, 4);
        let before = n.params().clone();
        let run = run_bn_adaptation(&mut n, &p, &settings(10, 4)).unwrap();
        assert_eq!(run.trainable_params, arch.bn_param_count());
        let mut changed_bn = false;
        for spec in &before.specs {
            let r = spec.range();
            let same = before.data[r.clone()]
                .iter()
                .zip(&n.params().data[r])
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if spec.name.contains(".bn.") {
                changed_bn |= !same;
            } else {
                assert!(same, "{} changed", spec.name);
            }
        }
        assert!(changed_bn);
    }

    #[test]
    fn divergence_is_reported_not_hidden() {
        let arch = Architecture::ConvNet {
            channels: 1,
            width: 2,
            layers: 2,
            batch_norm: false,
            residual: false,
        };
        let p = ct_problem(16, 6);
        let mut n = net(&arch, 5);
        // The output bias sits after the last ReLU, so the NaN reaches the loss.
        let last = n.param_count() - 1;
        n.params_mut().data[last] = f32::NAN;
        let run = run_dip(&mut n, &p, &settings(5, 5)).unwrap();
        assert!(matches!(run.status, RunStatus::Aborted { iteration: 0, .. }));
        assert!(run.records.is_empty());
    }

    #[test]
    fn early_stopping_triggers() {
        let arch = Architecture::Identity { channels: 1 };
        let p = ct_problem(16, 6);
        let mut s = settings(50, 6);
        s.early_stopping = Some(EarlyStopping {
            patience: 3,
            min_delta: 0.0,
        });
        // The identity net has no parameters: MC never improves after the first step.
        let run = train(&mut net(&arch, 6), &p, &s, &mut |_| {}).unwrap();
        assert!(matches!(run.status, RunStatus::EarlyStopped { iteration: 3 }));
    }

    #[test]
    fn bad_settings_are_rejected() {
        let arch = Architecture::Identity { channels: 2 };
        let p = ct_problem(16, 6);
        assert!(train(&mut net(&arch, 0), &p, &settings(5, 0), &mut |_| {}).is_err());
        assert!(p.clone().with_angle_batches(7).is_err());
        let arch = Architecture::Identity { channels: 1 };
        let mut s = settings(5, 0);
        s.selector = ParameterSelector::BnOnly;
        assert!(train(&mut net(&arch, 0), &p, &s, &mut |_| {}).is_err());
    }
}
