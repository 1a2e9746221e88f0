use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::str::FromStr;
use std::sync::Mutex;

use crate::error::{Error, Result};

/// Flat `key = value` configuration with `#` comments.
///
/// Command-line overrides of the form `--key value` (or `--key=value`)
/// replace file entries. Reads are recorded so callers can reject keys
/// nobody asked for.
#[derive(Debug, Default)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
    read: Mutex<BTreeSet<String>>,
}

impl Clone for KvConfig {
    fn clone(&self) -> Self {
        Self {
            entries: self.entries.clone(),
            read: Mutex::new(self.read.lock().expect("config lock").clone()),
        }
    }
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    n + 1
                )));
            };
            let key = normalize(k.trim());
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
        }
        Ok(Self {
            entries,
            read: Mutex::default(),
        })
    }

    /// Applies `--key value` / `--key=value` pairs; returns the arguments
    /// that are not overrides.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<Vec<String>> {
        let mut rest = Vec::new();
        let mut it = args.iter();
        while let Some(a) = it.next() {
            let Some(flag) = a.strip_prefix("--") else {
                rest.push(a.clone());
                continue;
            };
            let (key, value) = match flag.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| Error::Config(format!("override `--{flag}` needs a value")))?;
                    (flag.to_string(), v.clone())
                }
            };
            self.entries.insert(normalize(&key), value);
        }
        Ok(rest)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(normalize(key), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(&normalize(key))
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        let key = normalize(key);
        self.read.lock().expect("config lock").insert(key.clone());
        self.entries.get(&key).map(String::as_str)
    }

    /// Typed value, or `default` when the key is absent.
    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{v}`: {e}"))),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self
            .raw(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))?;
        v.parse()
            .map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{v}`: {e}")))
    }

    /// Comma-separated list.
    pub fn list<T>(&self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T: FromStr + Clone,
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{s}`: {e}")))
                })
                .collect(),
        }
    }

    /// Keys present but never read.
    pub fn unused(&self) -> Vec<String> {
        let read = self.read.lock().expect("config lock");
        self.entries.keys().filter(|k| !read.contains(*k)).cloned().collect()
    }

    pub fn reject_unused(&self) -> Result<()> {
        let unused = self.unused();
        if unused.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unused.join(", "))))
        }
    }

    /// Canonical `key = value` text, sorted by key.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn normalize(key: &str) -> String {
    key.replace('-', "_")
}
