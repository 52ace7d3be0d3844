//! Run configuration from a JSON or flat `key = value` file plus overrides.
//!
//! Flat files hold one dotted path per line (`train.peak_lr = 0.002`,
//! `model.widths = [4,4,8,8,8,8,8]`); `#` starts a comment. Values parse as
//! JSON when possible and as strings otherwise. Everything is merged over the
//! defaults, so a file only names what it changes.

use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::train::RunConfig;

fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `path` (dot separated) inside `root`, creating objects as needed.
pub fn set_path(root: &mut Value, path: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad key {path:?}")));
    }
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        let obj = cur.as_object_mut().unwrap();
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), v);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// Parses one `key=value` assignment.
pub fn parse_assignment(line: &str) -> Result<(String, Value)> {
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
    Ok((k.trim().to_string(), parse_value(v)))
}

pub fn parse_flat(text: &str) -> Result<Value> {
    let mut root = Value::Object(Map::new());
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = parse_assignment(line)?;
        set_path(&mut root, &k, v)?;
    }
    Ok(root)
}

/// Recursively overlays `top` on `base`; non-object values replace.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn parse_config_text(text: &str) -> Result<Value> {
    if text.trim_start().starts_with('{') {
        Ok(serde_json::from_str(text)?)
    } else {
        parse_flat(text)
    }
}

/// `base`, then the file, then each `key=value` override in order.
pub fn resolve_run_config(base: &RunConfig, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut v = serde_json::to_value(base)?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        merge(&mut v, parse_config_text(&text)?);
    }
    for o in overrides {
        let (k, val) = parse_assignment(o)?;
        let mut patch = Value::Object(Map::new());
        set_path(&mut patch, &k, val)?;
        merge(&mut v, patch);
    }
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataSource;

    #[test]
    fn flat_file_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        fs::write(
            &p,
            "# desk run\ntrain.epochs = 3\nmodel.widths = [4,4,8,8,8,8,8]\ndata.seed = 9\n",
        )
        .unwrap();
        let c = resolve_run_config(&RunConfig::default(), Some(&p), &["train.peak_lr=0.01".into()]).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.peak_lr, 0.01);
        assert_eq!(c.model.widths, vec![4, 4, 8, 8, 8, 8, 8]);
        assert!(matches!(c.data, DataSource::Synth { seed: 9, .. }));
        assert_eq!(c.model.primary, RunConfig::default().model.primary);
    }

    #[test]
    fn json_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        fs::write(&p, r#"{"train": {"batch_size": 8}}"#).unwrap();
        assert_eq!(
            resolve_run_config(&RunConfig::default(), Some(&p), &[])
                .unwrap()
                .train
                .batch_size,
            8
        );
        assert!(resolve_run_config(&RunConfig::default(), None, &["train.bogus=1".into()]).is_err());
        assert!(resolve_run_config(&RunConfig::default(), None, &["no_equals".into()]).is_err());
    }
}
