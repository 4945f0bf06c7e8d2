//! JSON configuration files with dotted `key=value` overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug)]
pub enum ConfigError {
    /// Unknown key or malformed value; carries the offending key.
    Key { key: String, message: String },
    Read(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Key { key, message } => write!(f, "invalid configuration `{key}`: {message}"),
            ConfigError::Read(m) => write!(f, "{m}"),
        }
    }
}

fn merge(base: &mut Value, patch: Value, prefix: &str) -> Result<(), ConfigError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => {
                        return Err(ConfigError::Key {
                            key,
                            message: "unknown key".into(),
                        })
                    }
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

/// Parses `a.b.c=value`. The value is read as JSON when possible and as a
/// plain string otherwise.
pub fn parse_override(spec: &str) -> Result<(String, Value), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Key {
        key: spec.to_string(),
        message: "expected key=value".into(),
    })?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Key {
            key: key.to_string(),
            message: "empty key segment".into(),
        });
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Default config, overlaid with an optional JSON file, then with overrides.
/// Only keys present in the default may be set.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(
    file: Option<&Path>,
    overrides: &[String],
) -> Result<(T, Value), ConfigError> {
    let mut value = serde_json::to_value(T::default()).expect("defaults serialise");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read(format!("cannot read {}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| ConfigError::Key {
            key: path.display().to_string(),
            message: format!("malformed json: {e}"),
        })?;
        merge(&mut value, patch, "")?;
    }
    for spec in overrides {
        let (key, v) = parse_override(spec)?;
        let mut patch = v;
        for seg in key.rsplit('.') {
            let mut m = serde_json::Map::new();
            m.insert(seg.to_string(), patch);
            patch = Value::Object(m);
        }
        merge(&mut value, patch, "")?;
    }
    let typed: T = serde_json::from_value(value.clone()).map_err(|e| ConfigError::Key {
        key: overrides.last().cloned().unwrap_or_else(|| "config".into()),
        message: e.to_string(),
    })?;
    // Re-serialise so the stamp shows exactly what was used.
    let canonical = serde_json::to_value(&typed).expect("config serialises");
    Ok((typed, canonical))
}

/// Hex SHA-256 of the compact JSON form.
pub fn config_hash(value: &Value) -> String {
    let bytes = serde_json::to_vec(value).expect("json value serialises");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
