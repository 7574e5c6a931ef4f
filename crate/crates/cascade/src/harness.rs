//! Runs a scenario in simulated or wall-clock time and writes its artifacts.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use cascade_core::pipeline::run_script;
use cascade_core::pipeline::{build_stages, Artifacts, PipelineError};
use cascade_core::runtime::{diff_logs, LogDiff, RunError};
use cascade_core::time::ms;
use cascade_core::{Bus, EventLog, PipelineConfig, RunOutput, ScenarioTrace, Script, StageSelection};
use thiserror::Error;

use crate::realtime::RealtimeRunner;
use crate::wav;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Mode {
    #[default]
    Sim,
    Realtime,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Wav(#[from] wav::WavError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type ScenarioOutput = RunOutput;

pub fn compile(trace: &ScenarioTrace, cfg: &PipelineConfig) -> Arc<dyn Script> {
    Arc::new(trace.compile(cfg.tail_ms).with_recorded_length(cfg.sample_rate))
}

pub fn run_scenario(
    trace: &ScenarioTrace,
    cfg: &PipelineConfig,
    mode: Mode,
    sel: StageSelection,
) -> Result<ScenarioOutput, HarnessError> {
    trace.validate().map_err(PipelineError::from)?;
    let script = compile(trace, cfg);
    match mode {
        Mode::Sim => Ok(run_script(trace, script, cfg, sel)?),
        Mode::Realtime => run_realtime(trace, script, cfg, sel),
    }
}

fn run_realtime(
    trace: &ScenarioTrace,
    script: Arc<dyn Script>,
    cfg: &PipelineConfig,
    sel: StageSelection,
) -> Result<ScenarioOutput, HarnessError> {
    let mut runner = RealtimeRunner::new(Bus::with_pipeline_topics(cfg.bus_capacity), trace.seed, cfg.jitter);
    for s in build_stages(trace, script.clone(), cfg, sel, None)? {
        runner.register_stage(s)?;
    }
    let until = script.audio_end().unwrap_or(0) + ms(60_000);
    let out = runner.start()?.wait(Some(until))?;
    let artifacts = Artifacts::collect(|n| out.stage(n));
    Ok(RunOutput::assemble(out.log.clone(), out.ledger.clone(), out.stale_dropped.clone(), artifacts))
}

/// `report.json`, `report.txt` and `events.log` into `dir`.
pub fn write_report(out: &ScenarioOutput, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(&out.report).map_err(std::io::Error::other)?;
    fs::write(dir.join("report.json"), json)?;
    fs::write(dir.join("report.txt"), out.report.to_text())?;
    fs::write(dir.join("events.log"), out.log.serialize())?;
    Ok(())
}

pub fn write_pcm(out: &ScenarioOutput, dir: &Path, rate: u32) -> Result<Vec<std::path::PathBuf>, HarnessError> {
    Ok(wav::write_turns(dir, &out.pcm, rate)?)
}

/// Reads two serialized event logs and lists where they differ.
pub fn diff_files(a: &Path, b: &Path) -> Result<Vec<LogDiff>, HarnessError> {
    let read = |p: &Path| -> Result<EventLog, HarnessError> {
        let text = fs::read_to_string(p)?;
        EventLog::parse(&text).ok_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{} is not an event log", p.display())).into()
        })
    };
    Ok(diff_logs(&read(a)?, &read(b)?))
}
