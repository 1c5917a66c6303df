//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "LDSCKPT\0"
//! version  u32
//! len      u64      length of the JSON manifest
//! manifest len bytes of UTF-8 JSON
//! params   f64 LE values of every tensor, in manifest order
//! adam     if manifest.optimizer is set: 5 config f64s, then m and v
//!          for every tensor, in manifest order
//! ```
//!
//! Floats are stored as raw bits, so a write/read cycle is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LDSCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub step: u64,
    pub skipped: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub config_hash: String,
    /// Training step the checkpoint was taken at.
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerEntry>,
    /// Free-form metadata owned by the caller (model config, notes).
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(
        params: ParamStore,
        optimizer: Option<AdamState>,
        seed: u64,
        config_hash: impl Into<String>,
        step: u64,
        meta: serde_json::Value,
    ) -> Self {
        let tensors = params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        let optimizer_entry = optimizer.as_ref().map(|o| OptimizerEntry {
            step: o.step,
            skipped: o.skipped,
        });
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                seed,
                config_hash: config_hash.into(),
                step,
                tensors,
                optimizer: optimizer_entry,
                meta,
            },
            params,
            optimizer,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let manifest = serde_json::to_vec(&self.manifest)
            .map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        for t in self.params.tensors() {
            write_f64s(w, t.data())?;
        }
        if let Some(opt) = &self.optimizer {
            let c = opt.config;
            write_f64s(w, &[c.lr, c.beta1, c.beta2, c.eps, c.weight_decay])?;
            for (m, v) in opt.m.iter().zip(&opt.v) {
                write_f64s(w, m)?;
                write_f64s(w, v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(read_array(r)?);
        if version != FORMAT_VERSION {
            return Err(TensorError::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let len = u64::from_le_bytes(read_array(r)?) as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let manifest: Manifest =
            serde_json::from_slice(&buf).map_err(|e| TensorError::Checkpoint(e.to_string()))?;

        let mut params = ParamStore::new();
        for entry in &manifest.tensors {
            let n: usize = entry.shape.iter().product();
            let data = read_f64s(r, n)?;
            params.add(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
        }
        let optimizer = match &manifest.optimizer {
            None => None,
            Some(o) => {
                let c = read_f64s(r, 5)?;
                let config = AdamConfig {
                    lr: c[0],
                    beta1: c[1],
                    beta2: c[2],
                    eps: c[3],
                    weight_decay: c[4],
                };
                let mut m = Vec::new();
                let mut v = Vec::new();
                for t in params.tensors() {
                    m.push(read_f64s(r, t.numel())?);
                    v.push(read_f64s(r, t.numel())?);
                }
                Some(AdamState {
                    config,
                    step: o.step,
                    m,
                    v,
                    skipped: o.skipped,
                })
            }
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(TensorError::Checkpoint(format!(
                "{} trailing bytes",
                rest.len()
            )));
        }
        Ok(Self {
            manifest,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn write_f64s<W: Write>(w: &mut W, data: &[f64]) -> Result<()> {
    for v in data {
        w.write_all(&v.to_bits().to_le_bytes())?;
    }
    Ok(())
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::read_from(&mut &b"notacheckpoint.."[..]).is_err());
    }

    #[test]
    fn rejects_trailing_bytes() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::scalar(0.25));
        let ck = Checkpoint::new(p, None, 1, "h", 0, serde_json::Value::Null);
        let mut bytes = ck.to_bytes().unwrap();
        bytes.push(0);
        assert!(Checkpoint::read_from(&mut bytes.as_slice()).is_err());
    }
}
