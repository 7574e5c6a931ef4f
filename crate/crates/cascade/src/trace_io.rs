//! Scenario traces on disk (JSON, schema-versioned).

use std::fs;
use std::path::{Path, PathBuf};

use cascade_core::script::TraceError;
use cascade_core::ScenarioTrace;
use thiserror::Error;

use crate::wav;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error in {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    InvalidTimeline { path: PathBuf, source: TraceError },
    #[error("audio for {path}: {source}")]
    Audio { path: PathBuf, source: wav::WavError },
}

/// Reads and validates a trace. A relative `audio_path` is resolved against
/// the trace's directory and loaded at `sample_rate`.
pub fn load_trace(path: impl AsRef<Path>) -> Result<ScenarioTrace, LoadError> {
    load_trace_at_rate(path, 16_000)
}

pub fn load_trace_at_rate(path: impl AsRef<Path>, sample_rate: u32) -> Result<ScenarioTrace, LoadError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| LoadError::Io { path: path.into(), source })?;
    let mut trace = parse_trace(&text).map_err(|source| LoadError::Parse { path: path.into(), source })?;
    trace.validate().map_err(|source| LoadError::InvalidTimeline { path: path.into(), source })?;
    if let Some(rel) = &trace.audio_path {
        let audio = path.parent().unwrap_or(Path::new(".")).join(rel);
        let samples =
            wav::read_mono(&audio, sample_rate).map_err(|source| LoadError::Audio { path: path.into(), source })?;
        trace.audio = Some(samples);
    }
    Ok(trace)
}

pub fn parse_trace(text: &str) -> Result<ScenarioTrace, serde_json::Error> {
    serde_json::from_str(text)
}

pub fn save_trace(trace: &ScenarioTrace, path: impl AsRef<Path>) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(trace).map_err(std::io::Error::other)?;
    fs::write(path, text)
}
