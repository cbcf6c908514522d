//! Flat `key = value` run configuration.
//!
//! Layers apply in order: built-in defaults, the config file, `--set`
//! assignments, then dedicated flags. A later layer replaces earlier values
//! key by key.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::{Map, Value};

pub const SNAPSHOT_FILE: &str = "resolved_config.json";

/// Numbers, booleans, `null` and JSON arrays are read as such; anything else
/// is a string.
pub fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    match serde_json::from_str::<Value>(raw) {
        Ok(v @ (Value::Number(_) | Value::Bool(_) | Value::Null | Value::Array(_) | Value::String(_))) => v,
        _ => Value::String(raw.to_string()),
    }
}

fn split_assignment(line: &str) -> Result<(String, Value)> {
    let (key, value) = line.split_once('=').with_context(|| format!("expected `key = value`, found `{line}`"))?;
    let key = key.trim();
    if key.is_empty() {
        bail!("empty key in `{line}`");
    }
    Ok((key.to_string(), parse_value(value)))
}

/// Parses a config file body. `#` starts a comment line; repeated keys are an error.
pub fn parse_flat(text: &str) -> Result<Map<String, Value>> {
    let mut out = Map::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = split_assignment(line).with_context(|| format!("line {}", n + 1))?;
        if out.insert(k.clone(), v).is_some() {
            bail!("line {}: key `{k}` given twice", n + 1);
        }
    }
    Ok(out)
}

/// Config file (if any) overlaid with `--set` assignments.
pub fn load_layers(file: Option<&Path>, sets: &[String]) -> Result<Map<String, Value>> {
    let mut map = match file {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            parse_flat(&text).with_context(|| format!("in config {}", path.display()))?
        }
        None => Map::new(),
    };
    for s in sets {
        let (k, v) = split_assignment(s).context("in --set")?;
        map.insert(k, v);
    }
    Ok(map)
}

/// Sets `key` when the flag was given.
pub fn put<T: Serialize>(map: &mut Map<String, Value>, key: &str, flag: Option<T>) {
    if let Some(v) = flag {
        map.insert(key.to_string(), serde_json::to_value(v).expect("flag value serialises"));
    }
}

/// Moves the keys named in `keys` out of `map`.
pub fn take(map: &mut Map<String, Value>, keys: &[&str]) -> Map<String, Value> {
    keys.iter().filter_map(|k| map.remove(*k).map(|v| (k.to_string(), v))).collect()
}

pub fn write_snapshot(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// `<file>.resolved.json` beside a single-file output.
pub fn snapshot_beside(output: &Path) -> std::path::PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".resolved.json");
    output.with_file_name(name)
}
