//! `skei run`: one experiment into one directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use skei::analysis::image_psnr;
use skei::config::{ExperimentConfig, Task};
use skei::experiment::{mri_model, run_experiment, Inputs};
use skei::nn::save_checkpoint;

use crate::figures::plot_run;
use crate::ingest::{image_to_raw, ingest_image, ingest_kspace, ingest_maps, preview_png};
use crate::rundir::*;

pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub paper_scale: bool,
    pub quiet: bool,
}

fn load_inputs(cfg: &ExperimentConfig) -> Result<Inputs<f32>> {
    let mut inputs = Inputs::default();
    if let Some(p) = &cfg.image_path {
        inputs.image = Some(ingest_image(p, cfg.image_size)?);
    }
    if cfg.task == Task::Mri {
        let m = cfg.mri();
        if let Some(p) = &m.maps_path {
            inputs.maps = Some(ingest_maps(p)?);
        }
        if let Some(p) = &m.kspace_path {
            let model = mri_model(cfg, &inputs)?;
            let k = ingest_kspace(p, model.mask().clone())?;
            if k.n_coils != m.n_coils {
                bail!("{}: {} coils, config says {}", p.display(), k.n_coils, m.n_coils);
            }
            inputs.kspace = Some(k.to_interleaved());
        }
    }
    Ok(inputs)
}

/// Runs `cfg` into `dir`. The manifest is written last.
pub fn run_config(
    cfg: &ExperimentConfig,
    seed_source: SeedSource,
    dir: &Path,
    opts: &RunOptions,
) -> Result<RunManifest> {
    if cfg.paper_scale && !opts.paper_scale {
        bail!("this config is marked paper_scale; pass --paper-scale to run it (expect hours of CPU time)");
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let stale = dir.join(MANIFEST);
    if stale.exists() {
        fs::remove_file(&stale)?;
    }
    let started = chrono::Utc::now().to_rfc3339();
    let inputs = load_inputs(cfg)?;
    let mut metrics = MetricsWriter::create(dir)?;
    let mut write_err = None;
    let quiet = opts.quiet;
    let every = (cfg.optimizer.iterations / 20).max(1);
    let outcome = run_experiment::<f32>(cfg, &inputs, &mut |r| {
        if let Err(e) = metrics.push(r) {
            write_err.get_or_insert(e);
        }
        if !quiet && (r.iter % every == 0 || r.iter + 1 == cfg.optimizer.iterations) {
            let psnr = r.psnr.map(|p| format!(" psnr {p:.2}")).unwrap_or_default();
            eprintln!(
                "iter {:>5}  mc {:.4e}  ei {:.4e}{psnr}  {:.1}s",
                r.iter, r.mc, r.ei, r.wall_time_s
            );
        }
    })?;
    drop(metrics);
    if let Some(e) = write_err {
        return Err(e);
    }
    let run = &outcome.run;
    let peak = outcome
        .problem
        .reference
        .as_ref()
        .map(|r| cfg.psnr_peak.unwrap_or_else(|| r.max() as f64));
    preview_png(&run.reconstruction, peak, &dir.join(RECON_PNG))?;
    image_to_raw(&run.reconstruction).write(&dir.join(RECON_RAW))?;
    save_checkpoint(&outcome.network, &dir.join(CHECKPOINT))?;
    plot_run(dir, &run.records, peak)?;

    let mut artifacts: Vec<String> = [METRICS, RECON_PNG, RECON_RAW, CHECKPOINT]
        .iter()
        .map(|s| s.to_string())
        .collect();
    artifacts.extend(FIGURES.iter().map(|f| format!("{FIGURE_DIR}/{f}")));
    let manifest = RunManifest {
        status: run.status.clone(),
        config: cfg.clone(),
        config_sha256: config_hash(cfg),
        seed: cfg.seed,
        seed_source,
        started,
        finished: chrono::Utc::now().to_rfc3339(),
        code_version: format!("skei {}", env!("CARGO_PKG_VERSION")),
        environment: environment_note(),
        psnr_peak: peak,
        input_psnr: outcome
            .problem
            .reference
            .as_ref()
            .map(|r| image_psnr(&outcome.problem.z, r, cfg.psnr_peak)),
        final_psnr: run.final_psnr,
        iterations: run.records.len(),
        s_per_iter: run.seconds_per_iter(),
        trainable_params: run.trainable_params,
        total_params: run.total_params,
        artifacts,
    };
    manifest.write(dir)?;
    Ok(manifest)
}

pub fn run_path(config: &Path, opts: &RunOptions) -> Result<(PathBuf, RunManifest)> {
    let (cfg, source) = load_config(config)?;
    let dir = opts.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let m = run_config(&cfg, source, &dir, opts)?;
    Ok((dir, m))
}
