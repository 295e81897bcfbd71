use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendConfig, HttpBackend, ScriptedBackend};

use super::CliError;

/// Keys accepted in the TOML config file. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub max_tokens: Option<u32>,
    pub temperature: Option<f64>,
    pub timeout_s: Option<f64>,
    pub retries: Option<u32>,
    pub retry_timeouts: Option<bool>,
    pub max_parallel: Option<usize>,
    pub parallel: Option<usize>,
    pub grounding_threshold: Option<f64>,
    pub max_retrievals: Option<u32>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    /// `http`, or `script:<file.json>` for a scripted backend.
    #[arg(long, default_value = "http")]
    pub backend: String,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub timeout_s: Option<f64>,
    #[arg(long)]
    pub retries: Option<u32>,
    #[arg(long)]
    pub max_parallel: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum BackendKind {
    Http,
    Script(PathBuf),
}

impl BackendKind {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        if s == "http" {
            Ok(BackendKind::Http)
        } else if let Some(path) = s.strip_prefix("script:") {
            Ok(BackendKind::Script(PathBuf::from(path)))
        } else {
            Err(CliError::io(format!(
                "unknown backend `{s}`; expected `http` or `script:<file>`"
            )))
        }
    }

    pub fn describe(&self) -> String {
        match self {
            BackendKind::Http => "http".into(),
            BackendKind::Script(p) => format!("script:{}", p.display()),
        }
    }
}

/// CLI flag, then config file, then built-in default.
pub fn effective_backend_config(args: &BackendArgs, file: &FileConfig) -> BackendConfig {
    let d = BackendConfig::default();
    BackendConfig {
        endpoint: args
            .endpoint
            .clone()
            .or(file.endpoint.clone())
            .unwrap_or(d.endpoint),
        model: args.model.clone().or(file.model.clone()).unwrap_or(d.model),
        max_tokens: args.max_tokens.or(file.max_tokens).unwrap_or(d.max_tokens),
        temperature: args
            .temperature
            .or(file.temperature)
            .unwrap_or(d.temperature),
        timeout_s: args.timeout_s.or(file.timeout_s).unwrap_or(d.timeout_s),
        retries: args.retries.or(file.retries).unwrap_or(d.retries),
        retry_timeouts: file.retry_timeouts.unwrap_or(d.retry_timeouts),
        max_parallel: args
            .max_parallel
            .or(file.max_parallel)
            .unwrap_or(d.max_parallel),
    }
}

pub fn build_backend(
    kind: &BackendKind,
    config: &BackendConfig,
) -> Result<Box<dyn Backend>, CliError> {
    match kind {
        BackendKind::Http => {
            let b = HttpBackend::new(config.clone()).map_err(|e| CliError::io(e.to_string()))?;
            Ok(Box::new(b))
        }
        BackendKind::Script(path) => {
            let b = ScriptedBackend::from_file(path).map_err(CliError::io)?;
            Ok(Box::new(b))
        }
    }
}
