//! Run manifests: everything needed to reproduce a command's outputs.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: u64,
    /// Input path → SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: &str, config: Value, seed: u64) -> Self {
        Self {
            command: command.to_owned(),
            config,
            seed,
            inputs: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        }
    }

    pub fn add_input(&mut self, path: &Path, bytes: &[u8]) {
        let digest = Sha256::digest(bytes);
        let hex = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.inputs.insert(path.display().to_string(), hex);
    }

    pub fn add_literal(&mut self, name: &str, bytes: &[u8]) {
        self.add_input(Path::new(name), bytes);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, self.to_json() + "\n").with_context(|| format!("writing {}", path.display()))
    }

    /// Writes next to an output when there is one, otherwise to stderr.
    pub fn emit(&self, path: Option<&Path>) -> anyhow::Result<()> {
        match path {
            Some(p) => self.write(p),
            None => {
                eprintln!("manifest: {}", serde_json::to_string(self)?);
                Ok(())
            }
        }
    }
}
