//! Option resolution: command-line flags, then a `key = value` config file,
//! then built-in defaults. Every value read is recorded with its source so
//! the run can be described and replayed exactly.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::Serialize;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Flag,
    Config,
    Default,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub value: String,
    pub source: Source,
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_config(text: &str, path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Validation(format!("{}:{}: expected key = value", path.display(), n + 1))
        })?;
        let key = k.trim().trim_start_matches("--").to_string();
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::Validation(format!("{}:{}: duplicate key {key}", path.display(), n + 1)));
        }
    }
    Ok(out)
}

pub struct Settings {
    flags: BTreeMap<String, String>,
    file: BTreeMap<String, String>,
    pub config_path: Option<PathBuf>,
    used: BTreeMap<String, Resolved>,
}

impl Settings {
    /// Collects the flags given on the command line. `known` lists every
    /// option of the subcommand; config-file keys outside it are rejected.
    pub fn from_matches(m: &ArgMatches, known: &[String]) -> Result<Self, CliError> {
        let mut flags = BTreeMap::new();
        for id in known {
            if m.value_source(id) != Some(ValueSource::CommandLine) {
                continue;
            }
            let value = if let Ok(Some(&b)) = m.try_get_one::<bool>(id) {
                b.to_string()
            } else {
                m.get_one::<String>(id).cloned().unwrap_or_default()
            };
            flags.insert(id.clone(), value);
        }
        let config_path = m.get_one::<String>("config").map(PathBuf::from);
        let file = match &config_path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", p.display())))?;
                let map = parse_config(&text, p)?;
                if let Some(bad) = map.keys().find(|k| !known.contains(k) || k.as_str() == "config") {
                    return Err(CliError::Validation(format!("unknown key {bad:?} in {}", p.display())));
                }
                map
            }
            None => BTreeMap::new(),
        };
        Ok(Self {
            flags,
            file,
            config_path,
            used: BTreeMap::new(),
        })
    }

    fn lookup(&self, key: &str) -> Option<(String, Source)> {
        if let Some(v) = self.flags.get(key) {
            return Some((v.clone(), Source::Flag));
        }
        self.file.get(key).map(|v| (v.clone(), Source::Config))
    }

    /// Whether `key` was set explicitly, by flag or config file.
    pub fn is_set(&self, key: &str) -> bool {
        self.lookup(key).is_some()
    }

    fn record<T: Display>(&mut self, key: &str, value: &T, source: Source) {
        self.used.insert(
            key.to_string(),
            Resolved {
                value: value.to_string(),
                source,
            },
        );
    }

    /// Typed value of `key`, falling back to `default`.
    pub fn get<T>(&mut self, key: &str, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let (value, source) = match self.lookup(key) {
            Some((raw, source)) => {
                let v = raw
                    .parse::<T>()
                    .map_err(|e| CliError::Validation(format!("--{key} {raw:?}: {e}")))?;
                (v, source)
            }
            None => (default, Source::Default),
        };
        self.record(key, &value, source);
        Ok(value)
    }

    /// Typed value of a key that has no default.
    pub fn require<T>(&mut self, key: &str) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let (raw, source) = self
            .lookup(key)
            .ok_or_else(|| CliError::Validation(format!("--{key} is required")))?;
        let v = raw
            .parse::<T>()
            .map_err(|e| CliError::Validation(format!("--{key} {raw:?}: {e}")))?;
        self.record(key, &v, source);
        Ok(v)
    }

    pub fn path(&mut self, key: &str) -> Result<PathBuf, CliError> {
        Ok(PathBuf::from(self.require::<String>(key)?))
    }

    pub fn resolved(&self) -> &BTreeMap<String, Resolved> {
        &self.used
    }

    /// Every resolved value as a config file that reproduces this run.
    pub fn to_config_text(&self) -> String {
        let mut s = String::from("# resolved settings; pass back with --config to rerun\n");
        for (k, r) in &self.used {
            s.push_str(&format!("{k} = {}\n", r.value));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_lines() {
        let m = parse_config("# c\n\nseed = 4\n--epochs=2\n", Path::new("x")).unwrap();
        assert_eq!(m["seed"], "4");
        assert_eq!(m["epochs"], "2");
        assert!(parse_config("seed 4", Path::new("x")).is_err());
        assert!(parse_config("a=1\na=2", Path::new("x")).is_err());
    }
}
