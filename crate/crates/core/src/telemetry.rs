//! Per-stage latency ledger and turn-level metrics.
//!
//! Every stage reports three kinds of sample:
//!
//! * `Wait`: input accumulated before one step (media time for the audio-side
//!   stages, elapsed time for the text-side ones);
//! * `Inference`: time spent producing one output;
//! * `Cumulative`: latency of the stage's output relative to a reference.
//!   Frontend stages (mic, mel, asr) measure from the capture start of the
//!   oldest audio that first contributed to the step. Stages after the turn
//!   boundary measure from the boundary to their first output of the turn.
//!
//! The ledger also tracks, per agent turn, the end of the last user word, the
//! boundary time and the first playback start, which gives time-to-first-audio
//! under either reference.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::message::{NgramIndex, TurnId};
use crate::time::{to_ms, Nanos};

/// Ledger rows in pipeline order.
pub const ROW_ORDER: [&str; 8] = ["mic", "mel", "asr", "llm-state", "llm", "tts", "vocoder", "player"];

/// Rows measured from the turn boundary rather than from audio capture.
pub const BOUNDARY_ROWS: [&str; 5] = ["llm-state", "llm", "tts", "vocoder", "player"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Wait,
    Inference,
    Cumulative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSample {
    pub start_ms: u64,
    pub length_ms: u64,
    pub speech_ratio: f64,
    pub invoked: bool,
    pub similarity: Option<f64>,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "sample", rename_all = "snake_case")]
pub enum TelemetrySample {
    Latency {
        row: String,
        kind: SampleKind,
        ms: f64,
        turn_id: TurnId,
    },
    /// End of the last user word before the boundary that opened `turn_id`.
    LastUserWord {
        turn_id: TurnId,
        at: Nanos,
    },
    /// Agent turn `turn_id` received the floor.
    Boundary {
        turn_id: TurnId,
        at: Nanos,
    },
    /// Playback of a chunk started.
    PlayStart {
        turn_id: TurnId,
        ngram_index: NgramIndex,
        at: Nanos,
        produced_at: Nanos,
    },
    Speaker(SpeakerSample),
    StaleDrop {
        stage: String,
        turn_id: TurnId,
    },
}

impl TelemetrySample {
    pub fn log_kind(&self) -> &'static str {
        match self {
            TelemetrySample::Latency { .. } => "telemetry.latency",
            TelemetrySample::LastUserWord { .. } => "telemetry.last_user_word",
            TelemetrySample::Boundary { .. } => "telemetry.boundary",
            TelemetrySample::PlayStart { .. } => "telemetry.play_start",
            TelemetrySample::Speaker(_) => "telemetry.speaker",
            TelemetrySample::StaleDrop { .. } => "telemetry.stale_drop",
        }
    }

    pub fn latency(row: &str, kind: SampleKind, ms: f64, turn_id: TurnId) -> Self {
        TelemetrySample::Latency { row: row.into(), kind, ms, turn_id }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    LastUserWord,
    TurnBoundary,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TelemetryError {
    NotRunning,
    NoAudioForTurn(TurnId),
    UnknownReference(TurnId),
}

impl fmt::Display for TelemetryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TelemetryError::NotRunning => f.write_str("telemetry recorded outside an active run"),
            TelemetryError::NoAudioForTurn(t) => write!(f, "turn {t} has no played audio"),
            TelemetryError::UnknownReference(t) => write!(f, "turn {t} has no reference event"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TelemetryError {}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

impl Stats {
    pub fn from_samples(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let pct = |p: f64| {
            let idx = libm::ceil(p * v.len() as f64) as usize;
            v[idx.clamp(1, v.len()) - 1]
        };
        Some(Stats {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            p50: pct(0.5),
            p90: pct(0.9),
            p99: pct(0.99),
            max: v[v.len() - 1],
        })
    }
}

/// One report row: (wait, inference per output, cumulative).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub stage: String,
    pub wait_ms: f64,
    pub inference_ms_per_output: f64,
    pub cumulative_ms: f64,
    /// For rows after the boundary: cumulative measured from the last user word.
    pub cumulative_from_last_word_ms: Option<f64>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnLatency {
    pub turn_id: TurnId,
    pub from_last_user_word_ms: Option<f64>,
    pub from_boundary_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRecord>,
    pub turns: Vec<TurnLatency>,
    pub speaker: Vec<SpeakerSample>,
    pub stale_drops: BTreeMap<String, u64>,
}

impl LatencyReport {
    pub fn row(&self, stage: &str) -> Option<&LatencyRecord> {
        self.rows.iter().find(|r| r.stage == stage)
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>10} {:>12} {:>12} {:>14}",
            "stage", "wait ms", "infer ms", "total ms", "from word ms"
        );
        for r in &self.rows {
            let from_word = r.cumulative_from_last_word_ms.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<10} {:>10.1} {:>12.1} {:>12.1} {:>14}",
                r.stage, r.wait_ms, r.inference_ms_per_output, r.cumulative_ms, from_word
            );
        }
        if !self.turns.is_empty() {
            out.push('\n');
            let _ = writeln!(out, "{:<6} {:>22} {:>18}", "turn", "first audio (word) ms", "(boundary) ms");
            for t in &self.turns {
                let a = t.from_last_user_word_ms.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into());
                let b = t.from_boundary_ms.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into());
                let _ = writeln!(out, "{:<6} {:>22} {:>18}", t.turn_id, a, b);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlayRecord {
    pub turn_id: TurnId,
    pub ngram_index: NgramIndex,
    pub at: Nanos,
    pub produced_at: Nanos,
}

#[derive(Debug, Clone, Default)]
pub struct Ledger {
    running: bool,
    samples: Vec<(String, SampleKind, f64, TurnId)>,
    last_user_word: BTreeMap<TurnId, Nanos>,
    boundary: BTreeMap<TurnId, Nanos>,
    first_play: BTreeMap<TurnId, Nanos>,
    plays: Vec<PlayRecord>,
    speaker: Vec<SpeakerSample>,
    stale: BTreeMap<String, u64>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn begin(&mut self) {
        self.running = true;
    }

    pub fn finish(&mut self) {
        self.running = false;
    }

    pub fn is_running(&self) -> bool {
        self.running
    }

    pub fn record(&mut self, row: &str, kind: SampleKind, dt_ms: f64, turn_id: TurnId) -> Result<(), TelemetryError> {
        if !self.running {
            return Err(TelemetryError::NotRunning);
        }
        self.samples.push((row.into(), kind, dt_ms, turn_id));
        Ok(())
    }

    /// Folds a sample published on the telemetry topic into the ledger.
    pub fn ingest(&mut self, sample: &TelemetrySample) -> Result<(), TelemetryError> {
        if !self.running {
            return Err(TelemetryError::NotRunning);
        }
        match sample {
            TelemetrySample::Latency { row, kind, ms, turn_id } => {
                self.samples.push((row.clone(), *kind, *ms, *turn_id));
            }
            TelemetrySample::LastUserWord { turn_id, at } => {
                self.last_user_word.insert(*turn_id, *at);
            }
            TelemetrySample::Boundary { turn_id, at } => {
                self.boundary.insert(*turn_id, *at);
            }
            TelemetrySample::PlayStart { turn_id, ngram_index, at, produced_at } => {
                self.first_play.entry(*turn_id).or_insert(*at);
                self.plays.push(PlayRecord {
                    turn_id: *turn_id,
                    ngram_index: *ngram_index,
                    at: *at,
                    produced_at: *produced_at,
                });
            }
            TelemetrySample::Speaker(s) => self.speaker.push(s.clone()),
            TelemetrySample::StaleDrop { stage, .. } => *self.stale.entry(stage.clone()).or_default() += 1,
        }
        Ok(())
    }

    /// Every chunk playback start, in order.
    pub fn plays(&self) -> &[PlayRecord] {
        &self.plays
    }

    pub fn values(&self, row: &str, kind: SampleKind) -> Vec<f64> {
        self.samples.iter().filter(|(r, k, _, _)| r == row && *k == kind).map(|s| s.2).collect()
    }

    pub fn stats(&self, row: &str, kind: SampleKind) -> Option<Stats> {
        Stats::from_samples(&self.values(row, kind))
    }

    /// Agent turns that received the floor, in order.
    pub fn agent_turns(&self) -> Vec<TurnId> {
        self.boundary.keys().copied().collect()
    }

    pub fn time_to_first_audio(&self, turn_id: TurnId, reference: Reference) -> Result<f64, TelemetryError> {
        let played = *self.first_play.get(&turn_id).ok_or(TelemetryError::NoAudioForTurn(turn_id))?;
        let start = match reference {
            Reference::LastUserWord => self.last_user_word.get(&turn_id),
            Reference::TurnBoundary => self.boundary.get(&turn_id),
        }
        .copied()
        .ok_or(TelemetryError::UnknownReference(turn_id))?;
        Ok(to_ms(played) - to_ms(start))
    }

    fn word_to_boundary_ms(&self, turn: TurnId) -> Option<f64> {
        Some(to_ms(*self.boundary.get(&turn)?) - to_ms(*self.last_user_word.get(&turn)?))
    }

    pub fn render_report(&self) -> LatencyReport {
        let mut rows = Vec::new();
        for row in ROW_ORDER {
            let wait = self.stats(row, SampleKind::Wait);
            let infer = self.stats(row, SampleKind::Inference);
            let cumulative: Vec<(f64, TurnId)> = self
                .samples
                .iter()
                .filter(|(r, k, _, _)| r == row && *k == SampleKind::Cumulative)
                .map(|s| (s.2, s.3))
                .collect();
            if wait.is_none() && infer.is_none() && cumulative.is_empty() {
                continue;
            }
            let cum_values: Vec<f64> = cumulative.iter().map(|c| c.0).collect();
            let from_word = if BOUNDARY_ROWS.contains(&row) {
                let shifted: Vec<f64> =
                    cumulative.iter().filter_map(|(v, t)| self.word_to_boundary_ms(*t).map(|o| v + o)).collect();
                Stats::from_samples(&shifted).map(|s| s.p50)
            } else {
                None
            };
            rows.push(LatencyRecord {
                stage: row.into(),
                wait_ms: wait.map_or(0.0, |s| s.mean),
                inference_ms_per_output: infer.map_or(0.0, |s| s.mean),
                cumulative_ms: Stats::from_samples(&cum_values).map_or(0.0, |s| s.p50),
                cumulative_from_last_word_ms: from_word,
                samples: infer.map_or(0, |s| s.count),
            });
        }
        let turns = self
            .agent_turns()
            .into_iter()
            .map(|t| TurnLatency {
                turn_id: t,
                from_last_user_word_ms: self.time_to_first_audio(t, Reference::LastUserWord).ok(),
                from_boundary_ms: self.time_to_first_audio(t, Reference::TurnBoundary).ok(),
            })
            .collect();
        LatencyReport { rows, turns, speaker: self.speaker.clone(), stale_drops: self.stale.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::ms;

    #[test]
    fn record_requires_running_ledger() {
        let mut l = Ledger::new();
        assert_eq!(l.record("mel", SampleKind::Inference, 1.0, 0), Err(TelemetryError::NotRunning));
        l.begin();
        l.record("mel", SampleKind::Inference, 1.0, 0).unwrap();
        let report = l.render_report();
        assert_eq!(report.row("mel").unwrap().inference_ms_per_output, 1.0);
    }

    #[test]
    fn percentiles_over_hundred_samples() {
        let mut l = Ledger::new();
        l.begin();
        for i in 1..=100 {
            l.record("asr", SampleKind::Inference, i as f64, 0).unwrap();
        }
        let s = l.stats("asr", SampleKind::Inference).unwrap();
        assert_eq!(s.count, 100);
        assert_eq!(s.mean, 50.5);
        assert_eq!(s.p50, 50.0);
        assert_eq!(s.p90, 90.0);
        assert_eq!(s.p99, 99.0);
    }

    #[test]
    fn first_audio_against_both_references() {
        let mut l = Ledger::new();
        l.begin();
        l.ingest(&TelemetrySample::LastUserWord { turn_id: 2, at: ms(1000) }).unwrap();
        l.ingest(&TelemetrySample::Boundary { turn_id: 2, at: ms(1150) }).unwrap();
        l.ingest(&TelemetrySample::PlayStart { turn_id: 2, ngram_index: 0, at: ms(1900), produced_at: 0 }).unwrap();
        l.ingest(&TelemetrySample::PlayStart { turn_id: 2, ngram_index: 0, at: ms(1925), produced_at: 0 }).unwrap();
        assert_eq!(l.time_to_first_audio(2, Reference::LastUserWord), Ok(900.0));
        assert_eq!(l.time_to_first_audio(2, Reference::TurnBoundary), Ok(750.0));
        assert_eq!(l.time_to_first_audio(4, Reference::LastUserWord), Err(TelemetryError::NoAudioForTurn(4)));
    }

    #[test]
    fn rows_follow_pipeline_order() {
        let mut l = Ledger::new();
        l.begin();
        for row in ["player", "asr", "mic", "tts"] {
            l.record(row, SampleKind::Wait, 0.0, 0).unwrap();
        }
        let names: Vec<_> = l.render_report().rows.into_iter().map(|r| r.stage).collect();
        assert_eq!(names, ["mic", "asr", "tts", "player"]);
    }
}
