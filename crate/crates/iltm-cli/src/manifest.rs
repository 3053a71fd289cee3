//! Run manifests: every command writes the complete effective configuration
//! (explicit and defaulted values, seeds, versions) as a flat key=value file
//! that can be fed straight back through `--config` to reproduce the run.

use std::path::Path;

use iltm_core::{Error, Result};

use crate::config::{ResolvedEntry, Source};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CONTAINER_FORMAT_VERSION: u32 = iltm_core::container::FORMAT_VERSION;

/// Keys the manifest adds on top of a command's own schema; commands accept
/// them back silently when a manifest is reused as a config file.
pub const BOOKKEEPING_KEYS: [&str; 3] = ["command", "tool_version", "container_format"];

pub fn render(command: &str, entries: &[ResolvedEntry]) -> String {
    let mut out = String::new();
    out.push_str("# run manifest: reusable as a --config file\n");
    let defaulted: Vec<&str> = entries
        .iter()
        .filter(|e| e.source == Source::Default)
        .map(|e| e.key.as_str())
        .collect();
    if defaulted.is_empty() {
        out.push_str("# defaulted keys: none\n");
    } else {
        out.push_str(&format!("# defaulted keys: {}\n", defaulted.join(", ")));
    }
    out.push_str(&format!("command = {command}\n"));
    out.push_str(&format!("tool_version = {TOOL_VERSION}\n"));
    out.push_str(&format!("container_format = {CONTAINER_FORMAT_VERSION}\n"));
    for e in entries {
        out.push_str(&format!("{} = {}\n", e.key, e.value));
    }
    out
}

pub fn write(path: &Path, command: &str, entries: &[ResolvedEntry]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, render(command, entries))?;
    Ok(())
}

/// When a manifest is reused as a config file, its `command` line must match
/// the command being run; a differing tool version gets a warning on stderr.
pub fn check_reuse(raw: &crate::config::RawConfig, command: &str) -> Result<()> {
    if let Some((recorded, _)) = raw.get("command") {
        if recorded != command {
            return Err(Error::config(format!(
                "config file records command '{recorded}' but '{command}' was invoked"
            )));
        }
    }
    if let Some((recorded, _)) = raw.get("tool_version") {
        if recorded != TOOL_VERSION {
            eprintln!(
                "warning: config file was written by version {recorded}, this is {TOOL_VERSION}"
            );
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RawConfig;

    fn entry(key: &str, value: &str, source: Source) -> ResolvedEntry {
        ResolvedEntry { key: key.into(), value: value.into(), source }
    }

    #[test]
    fn rendered_manifest_reloads_with_identical_values() {
        let entries = vec![
            entry("seed", "7", Source::Flag),
            entry("alpha", "0.5", Source::Default),
            entry("tasks_dir", "/tmp/tasks", Source::File),
        ];
        let text = render("meta-train", &entries);
        assert!(text.contains("# defaulted keys: alpha\n"));
        assert!(text.contains("command = meta-train\n"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        std::fs::write(&path, &text).unwrap();
        let raw = RawConfig::load(Some(&path)).unwrap();
        check_reuse(&raw, "meta-train").unwrap();
        assert_eq!(raw.get("seed").unwrap().0, "7");
        assert_eq!(raw.get("alpha").unwrap().0, "0.5");
        assert_eq!(raw.get("tasks_dir").unwrap().0, "/tmp/tasks");
    }

    #[test]
    fn command_mismatch_is_rejected() {
        let entries = vec![entry("seed", "7", Source::Default)];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        write(&path, "evaluate", &entries).unwrap();
        let raw = RawConfig::load(Some(&path)).unwrap();
        assert!(check_reuse(&raw, "meta-train").is_err());
    }

    #[test]
    fn rendering_is_deterministic() {
        let entries = vec![entry("a", "1", Source::Default), entry("b", "2", Source::File)];
        assert_eq!(render("dedupe", &entries), render("dedupe", &entries));
    }
}
