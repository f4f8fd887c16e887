//! Plain-text `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Each consumer takes the keys it
//! understands; [`KvConfig::finish`] rejects whatever is left over, so typos
//! surface as errors instead of silently falling back to defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::config(format!("line {}: duplicate key {key}", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Removes and parses `key`, if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| Error::config(format!("cannot parse {key} = {v}"))),
        }
    }

    /// Removes and parses a comma-separated list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::config(format!("cannot parse {key} = {v}"))))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Errors on any key no consumer claimed.
    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(_) => Err(Error::config(format!(
                "unknown keys: {}",
                self.entries.keys().cloned().collect::<Vec<_>>().join(", ")
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let mut kv = KvConfig::parse("# model\nchannels = 4, 8 # two stages\n\nseed=3\n").unwrap();
        assert_eq!(kv.take_list::<usize>("channels").unwrap(), Some(vec![4, 8]));
        assert_eq!(kv.take::<u64>("seed").unwrap(), Some(3));
        assert_eq!(kv.take::<u64>("seed").unwrap(), None);
        kv.finish().unwrap();
    }

    #[test]
    fn rejects_leftovers_duplicates_and_garbage() {
        assert!(KvConfig::parse("a = 1\nb = 2").unwrap().finish().is_err());
        assert!(KvConfig::parse("a = 1\na = 2").is_err());
        assert!(KvConfig::parse("just words").is_err());
        assert!(KvConfig::parse("a = x").unwrap().take::<u32>("a").is_err());
    }
}
