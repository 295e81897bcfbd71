use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::CliError;

/// Written next to the outputs of every run that produces files.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub stats: Value,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            config: Value::Null,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            stats: Value::Null,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: now(),
            finished_at: String::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        self.inputs.insert(
            path.display().to_string(),
            hex::encode(Sha256::digest(&bytes)),
        );
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Writes the manifest to `<primary output>.manifest.json`.
    pub fn write_beside(mut self, primary: &Path) -> Result<PathBuf, CliError> {
        self.finished_at = now();
        let path = manifest_path(primary);
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        write_file(&path, &(text + "\n"))?;
        Ok(path)
    }
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut name = primary
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    primary.with_file_name(name)
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}
