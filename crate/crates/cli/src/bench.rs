//! `skei bench`: a grid of runs over dotted config keys.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use serde_json::Value;
use skei::ExperimentConfig;

use crate::run::{run_config, RunOptions};
use crate::rundir::load_config;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchGrid {
    pub base: Value,
    /// Dotted key → values; every combination becomes one run.
    pub grid: BTreeMap<String, Vec<Value>>,
    pub output_dir: PathBuf,
    #[serde(default = "one")]
    pub jobs: usize,
    #[serde(default)]
    pub paper_scale: bool,
}

fn one() -> usize {
    1
}

fn set_dotted(v: &mut Value, key: &str, new: Value) -> Result<()> {
    let mut cur = v;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        let obj = cur
            .as_object_mut()
            .with_context(|| format!("grid key {key}: {p} is not an object"))?;
        cur = obj
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = cur
        .as_object_mut()
        .with_context(|| format!("grid key {key}: parent is not an object"))?;
    obj.insert(parts[parts.len() - 1].to_string(), new);
    Ok(())
}

fn label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string().replace(['{', '}', '"', ':', ',', ' '], ""),
    }
}

/// `(run name, config)` for every grid point, in lexicographic key order.
pub fn expand(grid: &BenchGrid) -> Result<Vec<(String, ExperimentConfig)>> {
    let mut points: Vec<(Vec<String>, Value)> = vec![(Vec::new(), grid.base.clone())];
    for (key, values) in &grid.grid {
        if values.is_empty() {
            bail!("grid key {key} has no values");
        }
        let mut next = Vec::new();
        for (names, cfg) in &points {
            for v in values {
                let mut c = cfg.clone();
                set_dotted(&mut c, key, v.clone())?;
                let mut n = names.clone();
                n.push(format!("{key}={}", label(v)));
                next.push((n, c));
            }
        }
        points = next;
    }
    points
        .into_iter()
        .map(|(names, v)| {
            let name = if names.is_empty() {
                "base".to_string()
            } else {
                names.join("_")
            };
            let mut cfg = ExperimentConfig::from_json(&v.to_string()).with_context(|| format!("grid point {name}"))?;
            cfg.output_dir = grid.output_dir.join(&name);
            Ok((name, cfg))
        })
        .collect()
}

/// Runs every grid point. With `jobs > 1` each point is a separate
/// `exe run` process owning its directory.
pub fn bench(grid_path: &Path, exe: Option<&Path>, jobs_override: Option<usize>) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(grid_path).with_context(|| format!("cannot read {}", grid_path.display()))?;
    let grid: BenchGrid = serde_json::from_str(&text).with_context(|| format!("in {}", grid_path.display()))?;
    let jobs = jobs_override.unwrap_or(grid.jobs).max(1);
    let points = expand(&grid)?;
    fs::create_dir_all(&grid.output_dir)?;
    let mut dirs = Vec::new();
    let mut running: Vec<(String, Child)> = Vec::new();
    for (name, cfg) in points {
        let dir = cfg.output_dir.clone();
        fs::create_dir_all(&dir)?;
        let cfg_path = dir.join("config.json");
        fs::write(&cfg_path, cfg.to_json())?;
        dirs.push(dir.clone());
        match exe {
            Some(exe) if jobs > 1 => {
                while running.len() >= jobs {
                    let (n, mut c) = running.remove(0);
                    wait(&n, &mut c)?;
                }
                let mut cmd = Command::new(exe);
                cmd.arg("run").arg(&cfg_path).arg("--quiet");
                if grid.paper_scale {
                    cmd.arg("--paper-scale");
                }
                running.push((name, cmd.spawn().context("spawning run")?));
            }
            _ => {
                eprintln!("bench: {name}");
                let (cfg, source) = load_config(&cfg_path)?;
                let opts = RunOptions {
                    out: None,
                    paper_scale: grid.paper_scale,
                    quiet: true,
                };
                run_config(&cfg, source, &dir, &opts)?;
            }
        }
    }
    for (n, mut c) in running {
        wait(&n, &mut c)?;
    }
    Ok(dirs)
}

fn wait(name: &str, c: &mut Child) -> Result<()> {
    let st = c.wait()?;
    if !st.success() {
        bail!("bench run {name} failed ({st})");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_expands_to_named_points() {
        let g: BenchGrid = serde_json::from_str(
            r#"{"base":{"task":"ct","image_size":32},"grid":{"ct.n_batches":[1,2,5],"method":["ei","sketched-ei"]},"output_dir":"out"}"#,
        )
        .unwrap();
        let pts = expand(&g).unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0].0, "ct.n_batches=1_method=ei");
        assert_eq!(pts[5].1.ct().n_batches, 5);
        assert_eq!(pts[5].1.output_dir, Path::new("out/ct.n_batches=5_method=sketched-ei"));
        let bad: BenchGrid =
            serde_json::from_str(r#"{"base":{"task":"ct"},"grid":{"ct.n_batches":[99]},"output_dir":"o"}"#).unwrap();
        assert!(format!("{:#}", expand(&bad).unwrap_err()).contains("n_batches"));
    }
}
