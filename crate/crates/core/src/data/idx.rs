//! IDX files: `0x00 0x00 0x08 ndim`, `ndim` big-endian u32 sizes, then raw
//! unsigned bytes.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes, path)
}

fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxArray> {
    let format = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let truncated = |detail: String| Error::Truncated {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 4 {
        return Err(truncated(format!("{} byte header", bytes.len())));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format(format!("bad magic {:02x} {:02x}", bytes[0], bytes[1])));
    }
    if bytes[2] != 0x08 {
        return Err(format(format!(
            "element type 0x{:02x}, expected unsigned byte 0x08",
            bytes[2]
        )));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(format("zero dimensions".into()));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(truncated("dimension sizes".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() < n {
        return Err(truncated(format!("{} of {n} data bytes", body.len())));
    }
    if body.len() > n {
        return Err(format(format!("{} trailing bytes", body.len() - n)));
    }
    Ok(IdxArray {
        dims,
        data: body.to_vec(),
    })
}

/// Writes an unsigned-byte IDX file.
pub fn write_idx(path: &Path, dims: &[usize], data: &[u8]) -> Result<()> {
    if dims.iter().product::<usize>() != data.len() || dims.is_empty() || dims.len() > 255 {
        return Err(Error::shape(
            "write_idx",
            format!("dims {dims:?} for {} bytes", data.len()),
        ));
    }
    let mut buf = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::shape("write_idx", format!("dimension {d}")))?;
        buf.extend_from_slice(&d.to_be_bytes());
    }
    buf.extend_from_slice(data);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Images `(n, rows, cols)` or `(n, channels, rows, cols)` and labels `(n,)`.
/// Pixels are scaled by `1/255`; the class count is `max label + 1`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let im = read_idx(images)?;
    let lb = read_idx(labels)?;
    let shape = match im.dims.as_slice() {
        &[n, h, w] => vec![n, 1, h, w],
        &[n, c, h, w] => vec![n, c, h, w],
        d => {
            return Err(Error::Format {
                path: images.to_path_buf(),
                detail: format!("image dims {d:?}, expected 3 or 4"),
            })
        }
    };
    if lb.dims.len() != 1 || lb.dims[0] != shape[0] {
        return Err(Error::Format {
            path: labels.to_path_buf(),
            detail: format!("label dims {:?} for {} images", lb.dims, shape[0]),
        });
    }
    let labels: Vec<usize> = lb.data.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let pixels = im.data.iter().map(|&b| b as f64 / 255.0).collect();
    let name = images
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(Tensor::new(shape, pixels)?, labels, name, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_headers() {
        let p = Path::new("mem");
        assert!(matches!(parse_idx(&[], p), Err(Error::Truncated { .. })));
        assert!(matches!(
            parse_idx(&[0, 0, 0x0d, 1, 0, 0, 0, 1, 0], p),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            parse_idx(&[1, 0, 8, 1, 0, 0, 0, 1, 0], p),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            parse_idx(&[0, 0, 8, 1, 0, 0, 0, 2, 7], p),
            Err(Error::Truncated { .. })
        ));
        assert_eq!(
            parse_idx(&[0, 0, 8, 1, 0, 0, 0, 2, 7, 9], p).unwrap(),
            IdxArray {
                dims: vec![2],
                data: vec![7, 9]
            }
        );
    }
}
