//! Flat key=value run configuration: values come from an optional config
//! file, are overridden by command-line flags, and fall back to per-command
//! defaults. Every resolved value is recorded with its source so the run
//! manifest can echo the complete effective configuration, and any key the
//! command does not know is rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use iltm_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedEntry {
    pub key: String,
    pub value: String,
    pub source: Source,
}

/// Raw key=value pairs before a command's schema has consumed them.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, (String, Source)>,
}

impl RawConfig {
    pub fn load(path: Option<&Path>) -> Result<RawConfig> {
        let mut cfg = RawConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::config(format!("cannot read config file {}: {}", path.display(), e))
            })?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = split_pair(line).ok_or_else(|| {
                    Error::config(format!(
                        "{}:{}: expected key = value, got '{}'",
                        path.display(),
                        lineno + 1,
                        line
                    ))
                })?;
                if cfg.entries.contains_key(&key) {
                    return Err(Error::config(format!(
                        "{}:{}: duplicate key '{}'",
                        path.display(),
                        lineno + 1,
                        key
                    )));
                }
                cfg.entries.insert(key, (value, Source::File));
            }
        }
        Ok(cfg)
    }

    /// Apply one `--set key=value` or named-flag override; flags always win
    /// over file values.
    pub fn set_flag(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), (value.into(), Source::Flag));
    }

    pub fn set_flag_pair(&mut self, pair: &str) -> Result<()> {
        let (key, value) = split_pair(pair)
            .ok_or_else(|| Error::config(format!("--set expects key=value, got '{}'", pair)))?;
        self.entries.insert(key, (value, Source::Flag));
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&(String, Source)> {
        self.entries.get(key)
    }
}

fn split_pair(s: &str) -> Option<(String, String)> {
    let eq = s.find('=')?;
    let key = s[..eq].trim();
    let value = s[eq + 1..].trim();
    if key.is_empty() {
        return None;
    }
    Some((key.to_string(), value.to_string()))
}

/// Consumes raw entries against a command's known keys, recording every
/// resolution. `finish` rejects keys nothing consumed.
#[derive(Debug)]
pub struct Resolver {
    raw: RawConfig,
    taken: Vec<String>,
    pub resolved: Vec<ResolvedEntry>,
}

impl Resolver {
    pub fn new(raw: RawConfig) -> Resolver {
        Resolver { raw, taken: Vec::new(), resolved: Vec::new() }
    }

    fn lookup(&mut self, key: &str, default: &str) -> (String, Source) {
        self.taken.push(key.to_string());
        match self.raw.get(key) {
            Some((v, s)) => (v.clone(), *s),
            None => (default.to_string(), Source::Default),
        }
    }

    pub fn get_str(&mut self, key: &str, default: &str) -> String {
        let (value, source) = self.lookup(key, default);
        self.resolved.push(ResolvedEntry { key: key.to_string(), value: value.clone(), source });
        value
    }

    pub fn get_usize(&mut self, key: &str, default: usize) -> Result<usize> {
        let v = self.get_str(key, &default.to_string());
        v.parse().map_err(|_| Error::config(format!("key '{}': '{}' is not an integer", key, v)))
    }

    pub fn get_u64(&mut self, key: &str, default: u64) -> Result<u64> {
        let v = self.get_str(key, &default.to_string());
        v.parse().map_err(|_| Error::config(format!("key '{}': '{}' is not an integer", key, v)))
    }

    pub fn get_f64(&mut self, key: &str, default: f64) -> Result<f64> {
        let v = self.get_str(key, &format!("{default}"));
        v.parse().map_err(|_| Error::config(format!("key '{}': '{}' is not a number", key, v)))
    }

    pub fn get_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        let v = self.get_str(key, &default.to_string());
        match v.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            other => {
                Err(Error::config(format!("key '{}': '{}' is not true or false", key, other)))
            }
        }
    }

    /// A path-valued key; empty string means unset.
    pub fn get_path(&mut self, key: &str, default: &str) -> Option<PathBuf> {
        let v = self.get_str(key, default);
        if v.is_empty() {
            None
        } else {
            Some(PathBuf::from(v))
        }
    }

    pub fn require_path(&mut self, key: &str) -> Result<PathBuf> {
        self.get_path(key, "").ok_or_else(|| {
            Error::config(format!("key '{}' is required (set it in the config file or by flag)", key))
        })
    }

    /// Reject any raw key no schema lookup consumed. `extra_allowed` lists
    /// bookkeeping keys (manifest echoes) that are tolerated everywhere.
    pub fn finish(self, extra_allowed: &[&str]) -> Result<Vec<ResolvedEntry>> {
        let mut unknown: Vec<String> = self
            .raw
            .entries
            .keys()
            .filter(|k| {
                !self.taken.contains(k)
                    && !extra_allowed.contains(&k.as_str())
                    && !crate::manifest::BOOKKEEPING_KEYS.contains(&k.as_str())
            })
            .cloned()
            .collect();
        if !unknown.is_empty() {
            unknown.sort();
            return Err(Error::config(format!("unknown configuration keys: {}", unknown.join(", "))));
        }
        Ok(self.resolved)
    }
}
