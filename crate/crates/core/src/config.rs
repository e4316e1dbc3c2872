//! Line-based `key = value` configuration files.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
    /// A key given twice is a conflict.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected `key = value`, got `{raw}`", n + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::InvalidConfig(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::InvalidConfig(format!("line {}: key `{k}` given twice", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    /// Applies `other` on top of `self`; later values win.
    pub fn overlay(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("`{key}`: cannot parse `{v}`"))),
        }
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.entries
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::InvalidConfig(format!("`{key}`: cannot parse `{v}`")))
            })
            .transpose()
    }

    /// Rejects keys outside `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for k in self.entries.keys() {
            if !known.contains(&k.as_str()) {
                return Err(Error::InvalidConfig(format!("unknown key `{k}`")));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let c = KvConfig::parse("# header\nsubjects = 40\n\nseed=7 # trailing\n").unwrap();
        assert_eq!(c.get("subjects", 0usize).unwrap(), 40);
        assert_eq!(c.get("seed", 0u64).unwrap(), 7);
        assert_eq!(c.get("missing", 1.5f64).unwrap(), 1.5);
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(KvConfig::parse("a = 1\na = 2").is_err());
        assert!(KvConfig::parse("just words").is_err());
        assert!(KvConfig::parse("a = x").unwrap().get("a", 0u32).is_err());
        assert!(KvConfig::parse("zzz = 1").unwrap().check_known(&["a"]).is_err());
    }

    #[test]
    fn overlay_wins() {
        let mut a = KvConfig::parse("x = 1\ny = 2").unwrap();
        a.overlay(&KvConfig::parse("x = 5").unwrap());
        assert_eq!(a.get("x", 0).unwrap(), 5);
        assert_eq!(a.get("y", 0).unwrap(), 2);
    }
}
