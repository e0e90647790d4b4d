//! `skei report`: one CSV row per run.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use skei::config::{ExperimentConfig, Method, MriSketch, Task};
use skei::trainer::RunStatus;

use crate::rawarray::write_atomic;
use crate::rundir::{run_dirs, RunManifest};

pub const REPORT: &str = "report.csv";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub run: String,
    pub task: String,
    pub method: String,
    pub sketch: String,
    pub psnr: Option<f64>,
    pub s_per_iter: f64,
    /// `s_per_iter` over the slowest run in the table.
    pub time_ratio: f64,
    pub trainable_params: usize,
    pub total_params: usize,
    pub iterations: usize,
    pub status: String,
}

fn sketch_label(cfg: &ExperimentConfig) -> String {
    if cfg.method != Method::SketchedEi {
        return "full".into();
    }
    match cfg.task {
        Task::Ct => format!("N={}", cfg.ct().n_batches),
        Task::Mri => match cfg.mri().sketch {
            MriSketch::None => "full".into(),
            MriSketch::CoilSketch { l, r, s, .. } => format!("coil L={l} R={r} S={s}"),
            MriSketch::Classical { n_keep } => format!("classical {n_keep}"),
        },
    }
}

fn kebab<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

pub fn rows(dir: &Path) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for run in run_dirs(dir)? {
        let m = RunManifest::read(&run)?;
        m.check_artifacts(&run)?;
        rows.push(ReportRow {
            run: run
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            task: kebab(&m.config.task),
            method: kebab(&m.config.method),
            sketch: sketch_label(&m.config),
            psnr: m.final_psnr,
            s_per_iter: m.s_per_iter,
            time_ratio: 0.0,
            trainable_params: m.trainable_params,
            total_params: m.total_params,
            iterations: m.iterations,
            status: match m.status {
                RunStatus::Completed => "completed".into(),
                RunStatus::EarlyStopped { iteration } => format!("early-stopped@{iteration}"),
                RunStatus::Aborted { iteration, .. } => format!("aborted@{iteration}"),
            },
        });
    }
    let slowest = rows.iter().map(|r| r.s_per_iter).fold(0.0, f64::max);
    for r in &mut rows {
        r.time_ratio = if slowest > 0.0 { r.s_per_iter / slowest } else { 0.0 };
    }
    Ok(rows)
}

/// Writes `report.csv` into `dir` and returns its text.
pub fn report(dir: &Path) -> Result<String> {
    let rows = rows(dir)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().context("flushing report")?;
    write_atomic(&dir.join(REPORT), &bytes)?;
    Ok(String::from_utf8(bytes)?)
}
