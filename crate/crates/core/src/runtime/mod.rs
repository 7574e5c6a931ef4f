//! Stage lifecycle and scheduling.
//!
//! A stage is a sequential worker written as a poll function. Each poll
//! either reports that the stage needs more input (`Idle`), or occupies the
//! worker for a duration and publishes its outputs when that duration ends
//! (`Busy`). Control signals are read between steps, never in the middle of
//! one. The same stage code runs under the deterministic [`Simulator`] and
//! under the threaded realtime driver in the `cascade` crate.

mod log;
mod sim;

pub use self::log::{diff_logs, EventLog, LogDiff, LogEvent};
pub use self::sim::{apply_jitter, RunError, Simulator, RUNTIME_STAGE};

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::bus::Topic;
use crate::message::{Envelope, Payload, TurnId};
use crate::telemetry::{SampleKind, TelemetrySample};
use crate::time::Nanos;

/// Input a stage accumulates before one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaitPolicy {
    /// Free-running source emitting one chunk per period.
    Period {
        ms: u32,
    },
    Chunks(u32),
    Frames(u32),
    /// Silence of at least this long.
    Pause {
        ms: u64,
    },
    Words(u32),
    /// Buffered output audio.
    AudioMs(u32),
    Nothing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub inputs: Vec<Topic>,
    pub outputs: Vec<Topic>,
    pub wait: WaitPolicy,
    /// Nominal inference time per output.
    pub inference_ms: f64,
    /// Produces input on its own clock.
    pub source: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub topic: Topic,
    pub turn_id: TurnId,
    pub payload: Payload,
}

impl Output {
    pub fn new(topic: Topic, turn_id: TurnId, payload: Payload) -> Self {
        Self { topic, turn_id, payload }
    }

    pub fn telemetry(sample: TelemetrySample, turn_id: TurnId) -> Self {
        Self { topic: Topic::TelemetrySamples, turn_id, payload: Payload::Telemetry(sample) }
    }

    pub fn latency(row: &str, kind: SampleKind, ms: f64, turn_id: TurnId) -> Self {
        Self::telemetry(TelemetrySample::latency(row, kind, ms, turn_id), turn_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    /// Nothing to do until new input arrives.
    Idle,
    /// Occupy the worker for `duration`, then publish `outputs`.
    Busy { duration: Nanos, outputs: Vec<Output> },
    /// Poll again at the given time (or earlier, on new input).
    SleepUntil(Nanos),
    /// The stage will never produce again.
    Done,
}

impl Step {
    pub fn emit(outputs: Vec<Output>) -> Step {
        Step::Busy { duration: 0, outputs }
    }
}

/// What a stage sees of the runtime during one poll.
pub trait Context {
    fn now(&self) -> Nanos;
    /// Next envelope for this stage: control first, stale turns filtered.
    fn recv(&mut self) -> Option<Envelope>;
    /// Records a stage-internal event in the run log.
    fn log(&mut self, kind: &str, turn_id: TurnId);
    /// Applies the configured latency jitter to a nominal duration.
    fn latency(&mut self, nominal: Nanos) -> Nanos;
}

/// Stages are `Any` so drivers can hand back typed state after a run.
pub trait Stage: Send + core::any::Any {
    fn spec(&self) -> &StageSpec;
    fn poll(&mut self, cx: &mut dyn Context) -> Step;
}
