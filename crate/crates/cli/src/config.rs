//! Option resolution: defaults, then a config file, then flags.

use std::fs;
use std::path::Path;

use mathgen_core::Error;
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config keys or values. Exit 1.
    Usage(String),
    /// Missing or malformed input data. Exit 2.
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

/// A value as written on the command line or in a key=value file: JSON when
/// it parses, otherwise a bare string.
fn scalar(raw: &str) -> Value {
    serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()))
}

fn key(raw: &str) -> String {
    raw.trim().trim_start_matches("--").replace('-', "_")
}

/// Parses a config file, JSON object or `key = value` lines (`#` comments).
pub fn parse_file(text: &str) -> Result<Map<String, Value>, String> {
    if text.trim_start().starts_with('{') {
        return match serde_json::from_str::<Value>(text) {
            Ok(Value::Object(m)) => Ok(m.into_iter().map(|(k, v)| (key(&k), v)).collect()),
            Ok(_) => Err("config JSON must be an object".into()),
            Err(e) => Err(format!("config JSON: {e}")),
        };
    }
    let mut out = Map::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("config line {}: expected key=value", i + 1))?;
        out.insert(key(k), scalar(v));
    }
    Ok(out)
}

pub fn resolve(defaults: &Value, file: Option<&Path>, flags: &[(String, String)], needs_seed: bool) -> Result<Value, Failure> {
    let mut merged = defaults.as_object().cloned().unwrap_or_default();
    let mut seed_given = false;
    if let Some(p) = file {
        let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("config file {}: {e}", p.display())))?;
        for (k, v) in parse_file(&text).map_err(Failure::Usage)? {
            if !merged.contains_key(&k) {
                return Err(Failure::Usage(format!("unknown config key `{k}`")));
            }
            seed_given |= k == "seed";
            merged.insert(k, v);
        }
    }
    for (k, v) in flags {
        seed_given |= k == "seed";
        merged.insert(k.clone(), scalar(v));
    }
    if needs_seed && !seed_given {
        return Err(Failure::Usage("a seed is required: pass --seed or set `seed` in --config".into()));
    }
    Ok(Value::Object(merged))
}

pub fn typed<T: DeserializeOwned>(v: Value) -> Result<T, Failure> {
    serde_json::from_value(v).map_err(|e| Failure::Usage(format!("bad config value: {e}")))
}
