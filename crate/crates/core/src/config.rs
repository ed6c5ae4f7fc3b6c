//! Flat `key=value` configuration text with one level of dotted sections.
//!
//! ```text
//! # comment
//! net.num_stacks = 2
//! train.lr = 0.0005
//! data.seed = 7
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Parsed configuration entries keyed by their full dotted name.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses config text. `origin` only labels error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, Some(i + 1), format!("expected key=value, got {line:?}")))?;
            let key = key.trim();
            if key.is_empty() || key.split('.').count() > 2 || key.split('.').any(str::is_empty) {
                return Err(Error::parse(origin, Some(i + 1), format!("invalid key {key:?}")));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::parse(origin, Some(i + 1), format!("duplicate key {key:?}")));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Sets `key`, replacing any earlier value.
    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    /// Entries under `section.`, with the prefix stripped.
    pub fn section(&self, section: &str) -> BTreeMap<String, String> {
        let prefix = format!("{section}.");
        self.entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    /// Fails on any key outside `sections` (or a bare key not in `top_level`).
    pub fn check_known(&self, sections: &[&str], top_level: &[&str]) -> Result<()> {
        for k in self.entries.keys() {
            let ok = match k.split_once('.') {
                Some((s, _)) => sections.contains(&s),
                None => top_level.contains(&k.as_str()),
            };
            if !ok {
                return Err(Error::config(format!("unknown config key {k:?}")));
            }
        }
        Ok(())
    }

    /// Adds every `key=value` line of `kv` under `section`.
    pub fn extend_section(&mut self, section: &str, kv: &str) {
        for line in kv.lines() {
            if let Some((k, v)) = line.split_once('=') {
                self.set(format!("{section}.{}", k.trim()), v.trim());
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Serialises back to sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
