//! Flat `section.key=value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma
//! separated. Every lookup reports the line of the offending entry.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, (usize, String)>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| Error::Config { line, message: format!("expected key=value, got `{trimmed}`") })?;
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::Config { line, message: format!("invalid key `{key}`") });
            }
            if entries.insert(key.to_string(), (line, value.trim().to_string())).is_some() {
                return Err(Error::Config { line, message: format!("duplicate key `{key}`") });
            }
        }
        Ok(ConfigMap { entries })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn insert(&mut self, key: &str, value: impl Display) {
        let line = self.entries.get(key).map_or(0, |e| e.0);
        self.entries.insert(key.to_string(), (line, value.to_string()));
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    fn parse_value<T: FromStr>(&self, key: &str, line: usize, v: &str) -> Result<T>
    where
        T::Err: Display,
    {
        v.parse::<T>().map_err(|e| Error::Config { line, message: format!("{key}: cannot parse `{v}`: {e}") })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => self.parse_value(key, *line, v).map(Some),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?.ok_or_else(|| Error::Config { line: 0, message: format!("missing required key `{key}`") })
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| self.parse_value(key, *line, s))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Fails on keys under `prefix` that are not in `known`.
    pub fn reject_unknown(&self, prefix: &str, known: &[&str]) -> Result<()> {
        for (key, (line, _)) in &self.entries {
            if let Some(rest) = key.strip_prefix(prefix) {
                if !known.contains(&rest) {
                    return Err(Error::Config { line: *line, message: format!("unknown key `{key}`") });
                }
            }
        }
        Ok(())
    }

    /// Canonical text: sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, (_, v))| format!("{k}={v}\n")).collect()
    }
}

/// Comma-joined list using shortest round-trip float formatting.
pub fn join<T: Display>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}
