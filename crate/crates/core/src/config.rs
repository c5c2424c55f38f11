//! TOML training configuration with `dotted.key=value` overrides.
//!
//! The document mirrors [`TrainConfig`] field names; nested network and
//! loss settings live under `network.*` and `weights.*`. Unknown keys are
//! rejected.

use std::path::Path;

use crate::error::{FuseError, Result};
use crate::training::TrainConfig;

/// Parses `key=value`. The value is read as a TOML literal, falling back to a
/// bare string (so `loss_variant=off` works without quotes).
pub fn parse_override(spec: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| FuseError::config(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(|part| part.is_empty()) {
        return Err(FuseError::config(format!("override `{spec}` has an empty key segment")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((key.to_string(), value))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = table;
    for part in parts {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| FuseError::config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Applies overrides on top of `table` and deserializes the result.
pub fn build_config(mut table: toml::Table, overrides: &[(String, toml::Value)]) -> Result<TrainConfig> {
    for (k, v) in overrides {
        set_dotted(&mut table, k, v.clone())?;
    }
    // Going through text keeps the offending line in the error report.
    let text = toml::to_string(&table).map_err(|e| FuseError::config(e.to_string()))?;
    let cfg: TrainConfig =
        toml::from_str(&text).map_err(|e| FuseError::config(format!("invalid configuration: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_table(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path).map_err(|e| FuseError::io(path, e))?;
    toml::from_str(&text).map_err(|e| FuseError::config(format!("{}: {}", path.display(), e.message())))
}

/// Config file (optional) with `key=value` overrides merged in. The result
/// is checked to deserialize into a valid [`TrainConfig`].
pub fn merged_table(path: Option<&Path>, overrides: &[String]) -> Result<toml::Table> {
    let mut table = match path {
        Some(p) => load_table(p)?,
        None => toml::Table::new(),
    };
    for o in overrides {
        let (k, v) = parse_override(o)?;
        set_dotted(&mut table, &k, v)?;
    }
    build_config(table.clone(), &[])?;
    Ok(table)
}

/// Config file (optional) plus `key=value` overrides, validated.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    build_config(merged_table(path, overrides)?, &[])
}

pub fn to_toml(cfg: &TrainConfig) -> String {
    toml::to_string(cfg).expect("config serializes to TOML")
}
