//! Flat `key = value` config files with one `[section]` per subcommand.
//!
//! ```text
//! # comments start with '#'
//! [train-bc]
//! method = lipsnet
//! target_lipschitz = 10
//! ```
//!
//! Keys before the first section header belong to the unnamed section `""`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use lipbc_core::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigFile {
    pub sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = ConfigFile::default();
        let mut current = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Contract(format!("config line {}: unterminated section header", n + 1)))?;
                current = name.trim().to_string();
                out.sections.entry(current.clone()).or_default();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Contract(format!("config line {}: expected 'key = value'", n + 1)))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Contract(format!("config line {}: empty key", n + 1)));
            }
            let section = out.sections.entry(current.clone()).or_default();
            if section.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Contract(format!("config line {}: duplicate key '{key}'", n + 1)));
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn section(&self, name: &str) -> Section {
        Section { values: self.sections.get(name).cloned().unwrap_or_default() }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, values) in &self.sections {
            if !name.is_empty() {
                let _ = writeln!(out, "[{name}]");
            }
            for (k, v) in values {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}

/// Values of one section.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Section {
    pub values: BTreeMap<String, String>,
}

impl Section {
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Contract(format!("config key '{key}': cannot parse '{v}'"))),
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => parse_list(v).map(Some).map_err(|_| Error::Contract(format!("config key '{key}': cannot parse '{v}'"))),
        }
    }
}

/// Comma-separated list; empty string gives an empty list.
pub fn parse_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, T::Err> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(str::parse).collect()
}

/// Flag value if given, else the config value, else the default.
pub fn resolve<T: FromStr>(flag: Option<T>, section: &Section, key: &str, default: T) -> Result<T> {
    match flag {
        Some(v) => Ok(v),
        None => Ok(section.get(key)?.unwrap_or(default)),
    }
}

/// Like [`resolve`] without a default.
pub fn require<T: FromStr>(flag: Option<T>, section: &Section, key: &str) -> Result<T> {
    match flag {
        Some(v) => Ok(v),
        None => section.get(key)?.ok_or_else(|| Error::Contract(format!("missing required setting '{key}'"))),
    }
}
