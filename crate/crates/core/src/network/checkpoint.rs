//! Checkpoint layout (little-endian):
//!
//! ```text
//! b"ICRCKPT\0" | version: u32 | manifest length: u64 | manifest JSON | f64 parameters
//! ```
//!
//! Parameters follow the manifest order; each is its row-major data.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ICRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    seed: u64,
    epoch: usize,
    params: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub epoch: usize,
}

pub fn save_checkpoint(path: &Path, model: &Model, epoch: usize) -> Result<()> {
    let manifest = Manifest {
        config: model.config().clone(),
        seed: model.seed(),
        epoch,
        params: model
            .names()
            .iter()
            .zip(model.params())
            .map(|(n, p)| Entry {
                name: n.clone(),
                shape: p.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::with_capacity(20 + json.len() + 8 * model.param_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in model.params() {
        for v in p.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let truncated = |detail: &str| Error::Truncated {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 20 {
        return Err(truncated("header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("unsupported version {version}"),
        });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < len {
        return Err(truncated("manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..len])?;
    let mut data = &body[len..];
    let mut named = Vec::with_capacity(manifest.params.len());
    for e in manifest.params {
        let n: usize = e.shape.iter().product();
        if data.len() < 8 * n {
            return Err(truncated(&format!("parameter {}", e.name)));
        }
        let values = data[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        data = &data[8 * n..];
        named.push((e.name, Tensor::new(e.shape, values)?));
    }
    if !data.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes", data.len()),
        });
    }
    Ok(Checkpoint {
        model: Model::from_parts(manifest.config, manifest.seed, named)?,
        epoch: manifest.epoch,
    })
}
