//! Streaming cascaded voice-agent pipeline.
//!
//! The crate holds everything that is pure computation: the two-lane message
//! bus, the stage trait and its deterministic discrete-event driver, the log-mel
//! frontend, and the stage simulators (recognizer, dialog generator, streaming
//! synthesis, vocoder and player). Nothing here touches files, sockets or the
//! wall clock, so it builds without `std` (an allocator is required).
//!
//! ```text
//! mic ─10ms─▶ mel ─frame─▶ asr ─token─▶ dialog-core ─n-gram─▶ tts-stream ─frame─▶ vocoder ─25ms─▶ player
//!                           │  halt ┌───────────┘              │                    │              │
//!                           └───────┴──────────────────────────┴────────────────────┴──────────────┘
//!                                   player ── playback feedback ──▶ dialog-core
//! ```

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod asr;
pub mod audio_out;
pub mod bus;
pub mod config;
pub mod dialog;
pub mod dsp;
pub mod message;
pub mod pipeline;
pub mod runtime;
pub mod script;
pub mod speaker;
pub mod telemetry;
pub mod time;
pub mod tts;

pub use bus::{Bus, BusError, Topic};
pub use config::PipelineConfig;
pub use message::{ControlKind, ControlSignal, Envelope, Payload, TurnId};
pub use pipeline::{run_sim, RunOutput, StageSelection};
pub use runtime::{EventLog, LogEvent, Simulator};
pub use script::{ScenarioTrace, Script};
pub use time::Nanos;
