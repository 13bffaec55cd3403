//! Dotted-path configuration overrides: any config field can be set from the
//! command line as `--section.field=value`.

use anyhow::{anyhow, Context};
use serde_json::Value;

use crate::{CliError, CliResult};

/// Parses one `--a.b.c=value` argument into (path, value).
fn parse_override(arg: &str) -> CliResult<(Vec<String>, Value)> {
    let body = arg
        .strip_prefix("--")
        .ok_or_else(|| CliError::usage(anyhow!("override must start with --: {arg}")))?;
    let (path, raw) = body
        .split_once('=')
        .ok_or_else(|| CliError::usage(anyhow!("override must be --key=value: {arg}")))?;
    if path.is_empty() {
        return Err(CliError::usage(anyhow!("empty override path: {arg}")));
    }
    // Values parse as JSON when they can (numbers, booleans, null, arrays);
    // anything else is a string.
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path.split('.').map(str::to_string).collect(), value))
}

fn set_path(root: &mut Value, path: &[String], value: Value) -> CliResult<()> {
    let mut node = root;
    for key in &path[..path.len() - 1] {
        node = node
            .as_object_mut()
            .ok_or_else(|| CliError::usage(anyhow!("override path {key} crosses a non-object")))?
            .entry(key.clone())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let map = node
        .as_object_mut()
        .ok_or_else(|| CliError::usage(anyhow!("override target is not an object")))?;
    map.insert(path.last().unwrap().clone(), value);
    Ok(())
}

/// Applies `--key=value` overrides to a JSON config tree.
pub fn apply_overrides(config: &mut Value, args: &[String]) -> CliResult<()> {
    for arg in args {
        let (path, value) = parse_override(arg)?;
        set_path(config, &path, value)?;
    }
    Ok(())
}

/// Loads a JSON config file, applies overrides, and deserializes it.
pub fn load_config<T: serde::de::DeserializeOwned>(
    path: &std::path::Path,
    overrides: &[String],
) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(CliError::runtime)?;
    let mut value: Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))
        .map_err(CliError::usage)?;
    apply_overrides(&mut value, overrides)?;
    serde_json::from_value(value)
        .with_context(|| format!("interpreting config {}", path.display()))
        .map_err(CliError::usage)
}
