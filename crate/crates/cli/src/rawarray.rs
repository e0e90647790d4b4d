//! Raw float arrays: one JSON header line, then little-endian f32 in C order.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Every logical element is a `(re, im)` pair.
    pub complex_interleaved: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawArray {
    pub shape: Vec<usize>,
    pub complex_interleaved: bool,
    pub data: Vec<f32>,
}

impl RawArray {
    pub fn new(shape: Vec<usize>, complex_interleaved: bool, data: Vec<f32>) -> Result<Self> {
        let a = Self {
            shape,
            complex_interleaved,
            data,
        };
        if a.data.len() != a.expected_len() {
            bail!(
                "shape {:?} needs {} values, got {}",
                a.shape,
                a.expected_len(),
                a.data.len()
            );
        }
        Ok(a)
    }

    pub fn expected_len(&self) -> usize {
        self.shape.iter().product::<usize>() * if self.complex_interleaved { 2 } else { 1 }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            shape: self.shape.clone(),
            dtype: "f4".into(),
            complex_interleaved: self.complex_interleaved,
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.reserve(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .context("raw array: missing header line")?;
        let header: Header = serde_json::from_slice(&bytes[..nl]).context("raw array: bad header")?;
        if header.dtype != "f4" {
            bail!("raw array: unsupported dtype {:?}", header.dtype);
        }
        let body = &bytes[nl + 1..];
        if body.len() % 4 != 0 {
            bail!("raw array: body is not a whole number of f32 values");
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(header.shape, header.complex_interleaved, data).context("raw array: header does not match body")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("in {}", path.display()))
    }
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_exactly() {
        let data = vec![
            0.0,
            -0.0,
            1.5,
            f32::MIN_POSITIVE,
            f32::NAN,
            f32::INFINITY,
            3.25e-20,
            -7.0,
        ];
        let a = RawArray::new(vec![2, 2], true, data).unwrap();
        let b = RawArray::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a.shape, b.shape);
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        let text = String::from_utf8_lossy(&a.to_bytes()[..60]).to_string();
        assert!(
            text.starts_with(r#"{"shape":[2,2],"dtype":"f4","complex_interleaved":true}"#),
            "{text}"
        );
    }

    #[test]
    fn mismatched_header_is_an_error() {
        let mut bytes = RawArray::new(vec![3], false, vec![1.0, 2.0, 3.0]).unwrap().to_bytes();
        bytes.truncate(bytes.len() - 4);
        assert!(RawArray::from_bytes(&bytes).is_err());
        assert!(
            RawArray::from_bytes(b"{\"shape\":[1],\"dtype\":\"f8\",\"complex_interleaved\":false}\n\0\0\0\0").is_err()
        );
        assert!(RawArray::from_bytes(b"no header").is_err());
        assert!(RawArray::new(vec![2, 2], false, vec![0.0; 3]).is_err());
    }
}
