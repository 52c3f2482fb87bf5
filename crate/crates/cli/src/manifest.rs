//! Reproducibility sidecars: every output artifact `x` gets `x.manifest`,
//! itself a valid config file holding the resolved settings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lipbc_core::container::file_hash;
use lipbc_core::{Error, Result};

use crate::config::ConfigFile;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunManifest {
    pub subcommand: String,
    /// Resolved settings, keyed as in the config file section.
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn file_key(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: u64) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            config: BTreeMap::new(),
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.config.insert(key.to_string(), value.to_string());
        self
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_hash(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(file_key(path), file_hash(path)?);
        Ok(())
    }

    pub fn to_config(&self) -> ConfigFile {
        let mut sections = BTreeMap::new();
        let mut run = BTreeMap::new();
        run.insert("subcommand".to_string(), self.subcommand.clone());
        run.insert("seed".to_string(), self.seed.to_string());
        run.insert("tool_version".to_string(), TOOL_VERSION.to_string());
        sections.insert("run".to_string(), run);
        let mut config = self.config.clone();
        config.insert("seed".to_string(), self.seed.to_string());
        sections.insert(self.subcommand.clone(), config);
        sections.insert("inputs".to_string(), self.inputs.clone());
        sections.insert("outputs".to_string(), self.outputs.clone());
        ConfigFile { sections }
    }

    pub fn render(&self) -> String {
        self.to_config().render()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg = ConfigFile::parse(text)?;
        let schema = |m: &str| Error::Schema(format!("manifest: {m}"));
        let run = cfg.sections.get("run").ok_or_else(|| schema("missing [run]"))?;
        let subcommand = run.get("subcommand").ok_or_else(|| schema("missing subcommand"))?.clone();
        let seed = run.get("seed").and_then(|s| s.parse().ok()).ok_or_else(|| schema("missing seed"))?;
        let mut config = cfg.sections.get(&subcommand).cloned().unwrap_or_default();
        config.remove("seed");
        Ok(Self {
            subcommand,
            config,
            seed,
            inputs: cfg.sections.get("inputs").cloned().unwrap_or_default(),
            outputs: cfg.sections.get("outputs").cloned().unwrap_or_default(),
        })
    }

    /// Writes `x.manifest` next to every recorded output in `dir`.
    pub fn write_sidecars(&self, outputs: &[&Path]) -> Result<()> {
        let text = self.render();
        for path in outputs {
            std::fs::write(sidecar_path(path), &text)?;
        }
        Ok(())
    }
}

/// Fails when `path` is absent, or when its sidecar manifest records a
/// different hash for it. Artifacts without a sidecar are accepted.
pub fn verify_input(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(());
    }
    let manifest = RunManifest::parse(&std::fs::read_to_string(&side)?)?;
    let recorded = manifest
        .outputs
        .get(&file_key(path))
        .ok_or_else(|| Error::Schema(format!("{} does not list {}", side.display(), path.display())))?;
    let actual = file_hash(path)?;
    if *recorded != actual {
        return Err(Error::Schema(format!("hash of {} does not match its manifest", path.display())));
    }
    Ok(())
}
