//! Plain-text `key = value` records.
//!
//! Each non-empty line not starting with `#` holds one key and a value. Values
//! are read as JSON scalars or arrays when they parse as such (`0.9`, `true`,
//! `[16, 32]`) and as bare strings otherwise. Records map onto flat serde
//! structs, so a file only needs to mention the keys it overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Ordered `(key, value)` pairs as they appear in the text.
pub fn parse(text: &str, origin: &Path) -> Result<Vec<(String, Value)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            reason: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                reason: "empty key".into(),
            });
        }
        let value = value.trim();
        let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_owned()));
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

pub fn to_text<T: Serialize>(record: &T) -> String {
    let value = serde_json::to_value(record).expect("record serializes to JSON");
    let Value::Object(map) = value else {
        panic!("kv records must be structs");
    };
    map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Apply `overrides` on top of `base` and rebuild the record.
pub fn merge<T: Serialize + DeserializeOwned>(
    base: &T,
    overrides: impl IntoIterator<Item = (String, Value)>,
) -> Result<T> {
    let Value::Object(mut map) = serde_json::to_value(base).expect("record serializes to JSON") else {
        panic!("kv records must be structs");
    };
    for (k, v) in overrides {
        if !map.contains_key(&k) {
            return Err(Error::config(format!("unknown key `{k}`")));
        }
        map.insert(k, v);
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| Error::config(e.to_string()))
}

pub type Pairs = Vec<(String, Value)>;

/// Keep only the keys that `T` knows about; returns `(known, unknown)`.
pub fn split_known<T: Serialize>(base: &T, pairs: Pairs) -> (Pairs, Pairs) {
    let keys: Map<String, Value> = match serde_json::to_value(base) {
        Ok(Value::Object(m)) => m,
        _ => Map::new(),
    };
    pairs.into_iter().partition(|(k, _)| keys.contains_key(k))
}

pub fn from_text<T: Serialize + DeserializeOwned>(base: &T, text: &str, origin: &Path) -> Result<T> {
    merge(base, parse(text, origin)?)
}
