//! Run directories: config loading, the manifest and the metrics table.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use skei::trainer::{IterRecord, RunStatus};
use skei::ExperimentConfig;

use crate::rawarray::write_atomic;

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.csv";
pub const RECON_PNG: &str = "reconstruction.png";
pub const RECON_RAW: &str = "reconstruction.raw";
pub const CHECKPOINT: &str = "checkpoint.ckpt";
pub const FIGURE_DIR: &str = "figures";
pub const FIGURES: [&str; 2] = ["psnr_vs_iter.png", "mse_vs_walltime.png"];
pub const SEED_VAR: &str = "SKEI_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedSource {
    Config,
    Env,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    #[serde(flatten)]
    pub status: RunStatus,
    pub config: ExperimentConfig,
    pub config_sha256: String,
    pub seed: u64,
    pub seed_source: SeedSource,
    pub started: String,
    pub finished: String,
    pub code_version: String,
    pub environment: String,
    /// Peak used for PSNR; `None` when there was no reference.
    pub psnr_peak: Option<f64>,
    /// PSNR of the network input `A†y`.
    pub input_psnr: Option<f64>,
    pub final_psnr: Option<f64>,
    pub iterations: usize,
    pub s_per_iter: f64,
    pub trainable_params: usize,
    pub total_params: usize,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(&dir.join(MANIFEST), text.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST);
        let text = fs::read_to_string(&p)
            .with_context(|| format!("incomplete run directory {}: no manifest", dir.display()))?;
        serde_json::from_str(&text).with_context(|| format!("bad manifest {}", p.display()))
    }

    /// Errors unless every listed artifact exists.
    pub fn check_artifacts(&self, dir: &Path) -> Result<()> {
        for a in &self.artifacts {
            if !dir.join(a).is_file() {
                bail!("incomplete run directory {}: missing {a}", dir.display());
            }
        }
        Ok(())
    }
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(cfg.to_json().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses, applies `SKEI_SEED` and validates.
pub fn load_config(path: &Path) -> Result<(ExperimentConfig, SeedSource)> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let mut cfg = ExperimentConfig::from_json(&text).with_context(|| format!("in {}", path.display()))?;
    let source = match std::env::var(SEED_VAR) {
        Ok(v) => {
            cfg.seed = v
                .trim()
                .parse()
                .with_context(|| format!("{SEED_VAR}={v:?} is not an unsigned integer"))?;
            SeedSource::Env
        }
        Err(_) => SeedSource::Config,
    };
    cfg.validate()?;
    Ok((cfg, source))
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    iter: usize,
    wall_time_s: f64,
    mc: f64,
    ei: f64,
    total: f64,
    psnr: Option<f64>,
}

/// Streams records into `metrics.csv`, flushing each row.
pub struct MetricsWriter {
    w: csv::Writer<fs::File>,
}

impl MetricsWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        let w = csv::Writer::from_path(dir.join(METRICS))?;
        Ok(Self { w })
    }

    pub fn push(&mut self, r: &IterRecord) -> Result<()> {
        self.w.serialize(Row {
            iter: r.iter,
            wall_time_s: r.wall_time_s,
            mc: r.mc,
            ei: r.ei,
            total: r.total,
            psnr: r.psnr,
        })?;
        self.w.flush()?;
        Ok(())
    }
}

pub fn read_metrics(dir: &Path) -> Result<Vec<IterRecord>> {
    let p = dir.join(METRICS);
    let mut r = csv::Reader::from_path(&p).with_context(|| format!("cannot read {}", p.display()))?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["iter", "wall_time_s", "mc", "ei", "total", "psnr"] {
        bail!("{}: unexpected columns {:?}", p.display(), headers);
    }
    r.deserialize::<Row>()
        .map(|row| {
            let row = row?;
            Ok(IterRecord {
                iter: row.iter,
                wall_time_s: row.wall_time_s,
                mc: row.mc,
                ei: row.ei,
                total: row.total,
                psnr: row.psnr,
            })
        })
        .collect()
}

pub fn environment_note() -> String {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!(
        "{}-{}, {} hardware threads; timings are machine-relative",
        std::env::consts::OS,
        std::env::consts::ARCH,
        threads
    )
}

/// Subdirectories of `dir` that look like run directories.
pub fn run_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    if dir.join(MANIFEST).exists() || dir.join(METRICS).exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir() && (p.join(MANIFEST).exists() || p.join(METRICS).exists() || p.join("config.json").exists())
        })
        .collect();
    out.sort();
    if out.is_empty() {
        bail!("no run directories under {}", dir.display());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_round_trip_with_blank_psnr() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::create(dir.path()).unwrap();
        let a = IterRecord {
            iter: 0,
            wall_time_s: 0.5,
            mc: 1.25,
            ei: 0.0,
            total: 1.25,
            psnr: None,
        };
        let b = IterRecord {
            iter: 1,
            wall_time_s: 1.0,
            mc: 0.1,
            ei: 0.2,
            total: 0.30000000000000004,
            psnr: Some(21.5),
        };
        w.push(&a).unwrap();
        w.push(&b).unwrap();
        drop(w);
        let text = fs::read_to_string(dir.path().join(METRICS)).unwrap();
        assert!(
            text.starts_with("iter,wall_time_s,mc,ei,total,psnr\n0,0.5,1.25,0.0,1.25,\n"),
            "{text}"
        );
        assert_eq!(read_metrics(dir.path()).unwrap(), vec![a, b]);
    }

    #[test]
    fn missing_manifest_is_incomplete() {
        let dir = tempfile::tempdir().unwrap();
        let err = RunManifest::read(dir.path()).unwrap_err();
        assert!(format!("{err:#}").contains("incomplete"));
        assert!(run_dirs(dir.path()).is_err());
    }
}
