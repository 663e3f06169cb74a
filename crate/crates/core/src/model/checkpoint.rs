//! Single-file checkpoints: magic, format version, a JSON manifest, then
//! every parameter as little-endian `f32` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, NetTraj, Result};
use crate::autograd::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"NTCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl NetTraj {
    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(_, name, t)| ParamEntry { name: name.to_string(), rows: t.rows(), cols: t.cols() })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < len {
            return Err(bad("truncated manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.format_version != version {
            return Err(bad("manifest version disagrees with header"));
        }
        let mut data = &body[len..];
        let mut params = ParamStore::new();
        for p in &manifest.params {
            let n = p.rows * p.cols;
            if data.len() < 4 * n {
                return Err(bad(format!("truncated data for {}", p.name)));
            }
            let values = data[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            data = &data[4 * n..];
            params.add(p.name.clone(), Tensor::from_vec(p.rows, p.cols, values))?;
        }
        if !data.is_empty() {
            return Err(bad(format!("{} trailing bytes", data.len())));
        }
        NetTraj::from_parts(manifest.config, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
