//! Layered configuration: TOML file < `AVSEP_*` environment variables <
//! command line flags. Each layer writes into one JSON object which is
//! finally deserialized into the command's typed config, so unknown keys
//! are rejected in one place.

use std::path::{Path, PathBuf};

use avsep::{AvsepError, Result};
use serde_json::{Map, Value};

/// Loads the file and environment layers for one command. A config file may
/// either hold the command's keys at top level or group them under a
/// `[<command>]` table (ignoring other commands' tables).
pub fn load_layers(path: Option<&Path>, command: &str) -> Result<Map<String, Value>> {
    let mut layer = Map::new();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)?;
        let parsed: toml::Value = text
            .parse()
            .map_err(|e| AvsepError::Config(format!("bad config file: {e}")))?;
        let section = match &parsed {
            toml::Value::Table(t) if t.values().all(|v| v.is_table()) => {
                t.get(command).cloned().unwrap_or(toml::Value::Table(Default::default()))
            }
            other => other.clone(),
        };
        if let Value::Object(map) = toml_to_json(&section) {
            for (k, v) in map {
                layer.insert(k, v);
            }
        }
    }
    for (key, value) in std::env::vars() {
        if let Some(name) = key.strip_prefix("AVSEP_") {
            let name = name.to_lowercase();
            // parse numerals/booleans when possible, fall back to string
            let parsed = serde_json::from_str::<Value>(&value).unwrap_or(Value::String(value));
            layer.insert(name, parsed);
        }
    }
    Ok(layer)
}

fn toml_to_json(v: &toml::Value) -> Value {
    match v {
        toml::Value::String(s) => Value::String(s.clone()),
        toml::Value::Integer(i) => Value::from(*i),
        toml::Value::Float(f) => Value::from(*f),
        toml::Value::Boolean(b) => Value::from(*b),
        toml::Value::Datetime(d) => Value::String(d.to_string()),
        toml::Value::Array(a) => Value::Array(a.iter().map(toml_to_json).collect()),
        toml::Value::Table(t) => {
            Value::Object(t.iter().map(|(k, v)| (k.clone(), toml_to_json(v))).collect())
        }
    }
}

/// Writes a flag override into the layer when the flag was given.
pub fn set_opt<T: serde::Serialize>(layer: &mut Map<String, Value>, key: &str, value: Option<T>) {
    if let Some(v) = value {
        layer.insert(key.to_string(), serde_json::to_value(v).expect("serializable flag"));
    }
}

/// Extracts a required path key (set via config file, env, or flag).
pub fn take_path(layer: &mut Map<String, Value>, key: &str) -> Result<PathBuf> {
    match layer.remove(key) {
        Some(Value::String(s)) => Ok(PathBuf::from(s)),
        Some(other) => Err(AvsepError::Config(format!("{key} must be a string, got {other}"))),
        None => Err(AvsepError::Config(format!("missing required setting: {key}"))),
    }
}

/// Deserializes the fully merged layer into the typed config; unknown keys
/// are rejected by the target type.
pub fn finish<T: serde::de::DeserializeOwned>(layer: Map<String, Value>) -> Result<T> {
    serde_json::from_value(Value::Object(layer))
        .map_err(|e| AvsepError::Config(format!("invalid configuration: {e}")))
}
