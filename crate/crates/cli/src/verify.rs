//! `skei verify-theory`: numerical checks of the sketching bounds on the
//! operator and network described by a config.

use std::path::Path;

use anyhow::Result;
use serde::Serialize;
use skei::analysis::{
    lipschitz_probe, partition_deviation, sandwich_check, spectrum_profile, SandwichRecord, SpectrumProfile,
};
use skei::config::{ExperimentConfig, Task};
use skei::experiment::{build_network, build_problem, Inputs};
use skei::linops::{LinearModel, MeasurementModel};
use skei::sketch::{make_angle_partition, restrict_model};
use skei::trainer::{stream_rng, Sketcher, Stream};

use crate::rawarray::write_atomic;

pub const THEORY: &str = "theory.json";

#[derive(Debug, Serialize)]
pub struct TheoryReport {
    pub task: String,
    /// Relative deviation `‖Aᵀ(SᵀS−I)A‖ / ‖AᵀA‖` per angle batch (CT).
    pub batch_deviation: Vec<f64>,
    pub spectrum: SpectrumProfile,
    /// Probed lower bounds of the network's Lipschitz constant, two seeds.
    pub lipschitz: [f64; 2],
    pub lipschitz_spread: f64,
    /// Advisory: the Lipschitz value is a probed lower bound.
    pub sandwich: Option<SandwichRecord>,
}

pub fn verify_theory(cfg: &ExperimentConfig, out: &Path) -> Result<TheoryReport> {
    let problem = build_problem::<f32>(cfg, &Inputs::default())?;
    let mut net = build_network::<f32>(cfg)?;
    let mut rng = stream_rng(cfg.seed, Stream::Data);
    let spectrum = spectrum_profile(&problem.model, 32, 1e-2, &mut rng);

    let (batch_deviation, sketched_pinv): (Vec<f64>, Option<Box<dyn Fn(&skei::Image<f32>) -> skei::Image<f32>>>) =
        match (&problem.model, cfg.task) {
            (MeasurementModel::Ct(ct), Task::Ct) => {
                let n = cfg.ct().n_batches;
                let part = make_angle_partition(ct.n_angles(), n)?;
                let devs = (0..n)
                    .map(|b| partition_deviation(ct, &part, b, 1e-6, 500, &mut rng))
                    .collect::<skei::Result<Vec<_>>>()?;
                let sk = restrict_model(ct, &problem.y, &part, 0)?;
                (devs, Some(Box::new(move |v| sk.model.pinv(&sk.model.forward(v)))))
            }
            _ => match &problem.sketcher {
                Sketcher::Fixed(sk) => {
                    let sk = sk.clone();
                    (Vec::new(), Some(Box::new(move |v| sk.model.pinv(&sk.model.forward(v)))))
                }
                _ => (Vec::new(), None),
            },
        };

    let base = problem.z.clone();
    let radius = 0.01 * (base.norm_sq() as f64 / base.data().len() as f64).sqrt().max(1e-3);
    let mut f = |x: &skei::Image<f32>| net.forward(x).expect("network accepts problem images");
    let l1 = lipschitz_probe(&mut f, &base, 16, radius, &mut stream_rng(cfg.seed, Stream::Noise))?;
    let l2 = lipschitz_probe(
        &mut f,
        &base,
        16,
        radius,
        &mut stream_rng(cfg.seed.wrapping_add(1), Stream::Noise),
    )?;
    let spread = (l1 - l2).abs() / l1.max(l2).max(f64::MIN_POSITIVE);

    let sandwich = match (&problem.reference, &sketched_pinv) {
        (Some(v), Some(sp)) => {
            let full = problem.model.pinv(&problem.model.forward(v));
            let sketched = sp(v);
            let dev = batch_deviation.first().copied().unwrap_or(f64::NAN);
            Some(sandwich_check(&mut f, v, &full, &sketched, l1.max(l2), dev))
        }
        _ => None,
    };
    net.norm_mode = cfg.norm_mode;

    let report = TheoryReport {
        task: format!("{:?}", cfg.task).to_lowercase(),
        batch_deviation,
        spectrum,
        lipschitz: [l1, l2],
        lipschitz_spread: spread,
        sandwich,
    };
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join(THEORY), serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(report)
}
