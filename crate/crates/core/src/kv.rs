//! Flat `key = value` configuration text.
//!
//! One entry per line, `#` starts a comment line, keys are dotted paths
//! (`noise.sigma`, `train.r1_gamma`). Output is sorted by key, so a map
//! serializes to a canonical form.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvMap(BTreeMap<String, String>);

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got {raw:?}", ln + 1)));
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", ln + 1)));
            }
            map.insert(k.to_string(), v.trim().to_string());
        }
        Ok(KvMap(map))
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl ToString) {
        self.0.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.0.contains_key(key)
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn extend(&mut self, other: KvMap) {
        self.0.extend(other.0);
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> KvMap {
        let p = format!("{prefix}.");
        KvMap(self.0.iter().filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone()))).collect())
    }

    /// All entries with `prefix.` prepended.
    pub fn prefixed(&self, prefix: &str) -> KvMap {
        KvMap(self.0.iter().map(|(k, v)| (format!("{prefix}.{k}"), v.clone())).collect())
    }

    /// Parse the value at `key`, if present.
    pub fn parse_opt<V: FromStr>(&self, key: &str) -> Result<Option<V>>
    where
        V::Err: fmt::Display,
    {
        self.get(key)
            .map(|s| s.parse::<V>().map_err(|e| Error::Config(format!("key `{key}`: cannot parse {s:?}: {e}"))))
            .transpose()
    }

    pub fn parse_or<V: FromStr>(&self, key: &str, default: V) -> Result<V>
    where
        V::Err: fmt::Display,
    {
        Ok(self.parse_opt(key)?.unwrap_or(default))
    }
}

impl fmt::Display for KvMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.0 {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
