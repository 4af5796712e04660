//! Flat `key = value` configuration text.
//!
//! Blank lines and lines starting with `#` are skipped. Later keys override
//! earlier ones; [`KvMap::merge`] layers one map over another.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Self::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::Config(format!("line {}: invalid key {k:?}", n + 1)));
            }
            map.entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(map)
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
            })
            .transpose()
    }

    pub fn update<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get_parsed(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<T>()
                            .map_err(|_| Error::Config(format!("invalid list item {s:?} for {key}")))
                    })
                    .collect()
            })
            .transpose()
    }

    /// Overrides entries of `self` with those of `other`.
    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Fails on the first key not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::Config(format!("unknown config key {k:?}"))),
            None => Ok(()),
        }
    }
}
