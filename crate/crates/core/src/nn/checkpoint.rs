//! Single-file checkpoints.
//!
//! Layout: the magic line `SKEI-CKPT 1`, one JSON line with the architecture
//! and the ordered tensor table (name, shape, kind), then every tensor as
//! little-endian f32 in table order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, Network, TensorMap, TensorSpec};
use crate::error::{Error, Result};
use crate::scalar::Real;

const MAGIC: &str = "SKEI-CKPT 1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    architecture: Architecture,
    tensors: Vec<TensorSpec>,
}

fn load_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Load(format!("{}: {msg}", path.display()))
}

/// Writes parameters and running statistics; the file appears atomically.
pub fn save_checkpoint<T: Real>(net: &Network<T>, path: &Path) -> Result<()> {
    let tensors: Vec<TensorSpec> = net.params().specs.iter().chain(&net.buffers().specs).cloned().collect();
    let header = Header {
        architecture: net.architecture().clone(),
        tensors,
    };
    let mut buf = Vec::with_capacity(64 + 4 * (net.params().len() + net.buffers().len()));
    writeln!(buf, "{MAGIC}")?;
    serde_json::to_writer(&mut buf, &header)?;
    buf.push(b'\n');
    for v in net.params().data.iter().chain(&net.buffers().data) {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn fill<T: Real>(map: &mut TensorMap<T>, expected: &[TensorSpec], values: &[f32]) {
    let mut at = 0;
    for spec in expected {
        let n = spec.len();
        let idx = map.specs.iter().position(|s| s.name == spec.name).expect("checked");
        for (d, &v) in map.tensor_mut(idx).iter_mut().zip(&values[at..at + n]) {
            *d = T::lit(v as f64);
        }
        at += n;
    }
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Network<T>> {
    let file = fs::File::open(path).map_err(|e| load_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| load_err(path, e))?;
    if line.trim_end() != MAGIC {
        return Err(load_err(path, "not a checkpoint file"));
    }
    line.clear();
    r.read_line(&mut line).map_err(|e| load_err(path, e))?;
    let header: Header = serde_json::from_str(&line).map_err(|e| load_err(path, format!("bad header: {e}")))?;

    // Build a fresh network for the layout, then overwrite every tensor.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut net = Network::<T>::new(&header.architecture, &mut rng).map_err(|e| load_err(path, e))?;
    let own: Vec<&TensorSpec> = net.params().specs.iter().chain(&net.buffers().specs).collect();
    if own.len() != header.tensors.len() {
        return Err(load_err(
            path,
            format!("expected {} tensors, file has {}", own.len(), header.tensors.len()),
        ));
    }
    for (a, b) in own.iter().zip(&header.tensors) {
        if a.name != b.name || a.shape != b.shape || a.kind != b.kind {
            return Err(load_err(
                path,
                format!("tensor mismatch: {} {:?} vs {} {:?}", a.name, a.shape, b.name, b.shape),
            ));
        }
    }
    let total: usize = header.tensors.iter().map(|t| t.len()).sum();
    let mut raw = Vec::new();
    r.read_to_end(&mut raw).map_err(|e| load_err(path, e))?;
    if raw.len() != 4 * total {
        return Err(load_err(
            path,
            format!("expected {} payload bytes, found {}", 4 * total, raw.len()),
        ));
    }
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let n_params = net.params().specs.len();
    let (ps, bs) = header.tensors.split_at(n_params);
    let split = ps.iter().map(|t| t.len()).sum::<usize>();
    fill(net.params_mut(), ps, &values[..split]);
    fill(net.buffers_mut(), bs, &values[split..]);
    Ok(net)
}
