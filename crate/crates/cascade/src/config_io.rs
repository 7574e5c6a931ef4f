//! Pipeline configuration files (TOML). Every key is optional; missing keys
//! keep their defaults, unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use cascade_core::PipelineConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
}

pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig, ConfigError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
    toml::from_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })
}

pub fn to_toml(cfg: &PipelineConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes")
}
