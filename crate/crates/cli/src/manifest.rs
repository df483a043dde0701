use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Provenance sidecar written next to every output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Value,
    pub seed: Option<u64>,
    pub version: &'static str,
    /// Input path to SHA-256 hex digest.
    pub inputs: BTreeMap<String, String>,
    pub timestamp: String,
}

impl RunManifest {
    pub fn new(command: &str, config: Value, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config,
            seed,
            version: env!("CARGO_PKG_VERSION"),
            inputs: BTreeMap::new(),
            timestamp: chrono::Utc::now().to_rfc3339(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs
            .insert(path.display().to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    /// Record a workload description and every tensor file it references.
    pub fn add_workload(&mut self, path: &Path) -> Result<()> {
        self.add_input(path)?;
        let spec: anda::workload::WorkloadSpec = serde_json::from_str(&fs::read_to_string(path)?)?;
        if let anda::workload::WorkloadSpec::Files(f) = spec {
            let base = path.parent().unwrap_or(Path::new("."));
            for m in &f.modules {
                for p in [&m.activations, &m.weights, &m.scales] {
                    self.add_input(&base.join(p))?;
                }
            }
        }
        Ok(())
    }

    pub fn sidecar_path(output: &Path) -> PathBuf {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        output.with_file_name(name)
    }

    pub fn write_for(&self, output: &Path) -> Result<()> {
        self.write_to(&Self::sidecar_path(output))
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}
