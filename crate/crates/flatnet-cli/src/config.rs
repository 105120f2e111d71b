//! Flat key=value configuration files and resolved-run records.
//!
//! Precedence for every parameter: command-line flag, then config file,
//! then built-in (usually data-relative) default. Whatever wins is written
//! to `config.resolved` in the output directory, sorted by key, so a run can
//! be reproduced from that file alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::Failure;

/// Parsed config file: raw string values by key. Keys a command does not
/// consult are ignored, so one file can serve several commands.
#[derive(Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::data(format!("cannot read config {}: {e}", path.display())))?;
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Failure::usage(format!(
                    "{}:{}: expected key=value, found `{line}`",
                    path.display(),
                    lineno + 1
                )));
            };
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    /// Typed lookup; parse failures are usage errors naming the key.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, Failure> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| Failure::usage(format!("config value for `{key}` is not valid: `{raw}`"))),
        }
    }
}

/// Accumulates the values a run actually used and writes `config.resolved`.
pub struct Resolved {
    entries: BTreeMap<String, String>,
}

impl Resolved {
    pub fn new(command: &str) -> Self {
        let mut entries = BTreeMap::new();
        entries.insert("command".to_string(), command.to_string());
        Resolved { entries }
    }

    pub fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf, Failure> {
        let mut text = String::new();
        for (k, v) in &self.entries {
            text.push_str(k);
            text.push('=');
            text.push_str(v);
            text.push('\n');
        }
        let path = out_dir.join("config.resolved");
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

/// Resolves one parameter through the flag / config / default chain and
/// records the winner.
pub fn resolve<T: FromStr + Clone + std::fmt::Display>(
    flag: Option<T>,
    cfg: &ConfigFile,
    key: &str,
    default: T,
    resolved: &mut Resolved,
) -> Result<T, Failure> {
    let value = match flag {
        Some(v) => v,
        None => cfg.get::<T>(key)?.unwrap_or(default),
    };
    resolved.set(key, &value);
    Ok(value)
}
