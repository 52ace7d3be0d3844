//! CIFAR binary records: label byte(s) then 3072 channel-major pixels.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PIXELS: usize = 3 * 32 * 32;

/// Which label a record carries. CIFAR-100 records store `coarse, fine`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CifarLabels {
    Cifar10,
    Coarse,
    Fine,
}

impl CifarLabels {
    fn label_bytes(self) -> usize {
        match self {
            CifarLabels::Cifar10 => 1,
            _ => 2,
        }
    }

    fn offset(self) -> usize {
        match self {
            CifarLabels::Fine => 1,
            _ => 0,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarLabels::Cifar10 => 10,
            CifarLabels::Coarse => 20,
            CifarLabels::Fine => 100,
        }
    }
}

pub fn load_cifar_bin(path: &Path, labels: CifarLabels) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let record = labels.label_bytes() + PIXELS;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("length {} is not a multiple of the {record}-byte record", bytes.len()),
        });
    }
    let n = bytes.len() / record;
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut ys = Vec::with_capacity(n);
    for r in bytes.chunks_exact(record) {
        ys.push(r[labels.offset()] as usize);
        pixels.extend(r[labels.label_bytes()..].iter().map(|&b| b as f64 / 255.0));
    }
    if let Some(&y) = ys.iter().find(|&&y| y >= labels.classes()) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("label {y} out of range for {} classes", labels.classes()),
        });
    }
    let name = path
        .file_stem()
        .map_or_else(|| "cifar".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, ys, name, labels.classes())
}

/// Writes records for `(label bytes, 3072 pixels)` pairs.
pub fn write_cifar_bin(path: &Path, records: &[(Vec<u8>, Vec<u8>)]) -> Result<()> {
    let mut buf = Vec::new();
    for (l, p) in records {
        if p.len() != PIXELS {
            return Err(Error::shape("write_cifar_bin", format!("{} pixels", p.len())));
        }
        buf.extend_from_slice(l);
        buf.extend_from_slice(p);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
