//! Host side of the pipeline: trace and config files, WAV artifacts, the
//! threaded realtime driver, the scenario harness and the session gateway.

pub mod config_io;
pub mod gateway;
pub mod harness;
pub mod realtime;
pub mod trace_io;
pub mod wav;

pub use harness::{run_scenario, Mode, ScenarioOutput};
pub use trace_io::{load_trace, LoadError};
