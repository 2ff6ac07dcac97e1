use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use collabvd::digest::sha256_hex;
use serde::Serialize;

/// Audit record written next to a command's outputs: every input and
/// output file by content digest, plus the config digest.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub tool_version: &'static str,
    pub config_digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template_version: Option<String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &'static str, config_digest: String) -> Self {
        Self {
            command,
            tool_version: env!("CARGO_PKG_VERSION"),
            config_digest,
            template_version: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        self.inputs
            .insert(path.display().to_string(), file_digest(path)?);
        Ok(self)
    }

    pub fn output(&mut self, path: &Path) -> Result<&mut Self> {
        self.outputs
            .insert(path.display().to_string(), file_digest(path)?);
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(bytes))
}

/// `out/split.json` becomes `out/split.run.json`.
pub fn beside(path: &Path) -> PathBuf {
    path.with_extension("run.json")
}
