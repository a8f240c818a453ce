//! Flat `key=value` text: config files, checkpoint headers and reports.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Sorted key/value pairs.
pub type KvMap = BTreeMap<String, String>;

/// Parse `key=value` lines. Blank lines and `#` comments are skipped;
/// whitespace around keys and values is trimmed.
pub fn parse(text: &str) -> Result<KvMap> {
    let mut out = KvMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key=value, got {raw:?}", no + 1)));
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", no + 1)));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k}", no + 1)));
        }
    }
    Ok(out)
}

/// Canonical rendering: sorted keys, one `key=value` per line.
pub fn render(map: &KvMap) -> String {
    map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Typed lookup that reports the key on parse failure.
pub fn get<T: FromStr>(map: &KvMap, key: &str) -> Result<Option<T>> {
    map.get(key)
        .map(|v| {
            v.parse::<T>()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        })
        .transpose()
}

/// Comma-separated list.
pub fn get_list<T: FromStr>(map: &KvMap, key: &str) -> Result<Option<Vec<T>>> {
    map.get(key)
        .map(|v| {
            v.split(',')
                .map(|s| {
                    s.trim()
                        .parse::<T>()
                        .map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}")))
                })
                .collect()
        })
        .transpose()
}

/// Reject keys under `prefix` that are not in `known`.
pub fn check_known(map: &KvMap, prefix: &str, known: &[&str]) -> Result<()> {
    for k in map.keys() {
        if let Some(rest) = k.strip_prefix(prefix) {
            if !known.contains(&rest) {
                return Err(Error::Config(format!("unknown key {k}")));
            }
        }
    }
    Ok(())
}
