//! Envelope and payload types carried on the bus.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::bus::Topic;
use crate::telemetry::TelemetrySample;
use crate::time::Nanos;

/// Conversation turn. User and agent turns alternate and each floor change
/// allocates a new id.
pub type TurnId = u32;

/// Index of a spoken n-gram within an agent turn. `-1` means nothing was
/// vocalized.
pub type NgramIndex = i32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub topic: Topic,
    pub producer: String,
    pub seq: u64,
    pub produced_at: Nanos,
    pub turn_id: TurnId,
    pub payload: Payload,
}

impl Envelope {
    pub fn new(topic: Topic, producer: &str, seq: u64, produced_at: Nanos, turn_id: TurnId, payload: Payload) -> Self {
        Self { topic, producer: producer.into(), seq, produced_at, turn_id, payload }
    }

    pub fn is_control(&self) -> bool {
        matches!(self.payload, Payload::Control(_))
    }

    pub fn control(&self) -> Option<&ControlSignal> {
        match &self.payload {
            Payload::Control(c) => Some(c),
            _ => None,
        }
    }
}

/// Exactly one media, text or control item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    Audio(AudioChunk),
    Mel(MelFrame),
    Token(TokenEvent),
    State(StateBlock),
    Words(WordChunk),
    Speech(SpeechFrame),
    Pcm(PcmChunk),
    Control(ControlSignal),
    Telemetry(TelemetrySample),
}

impl Payload {
    /// Short name used for event-log kinds.
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Audio(_) => "audio.chunk",
            Payload::Mel(_) => "mel.frame",
            Payload::Token(_) => "asr.token",
            Payload::State(_) => "llm.state",
            Payload::Words(_) => "llm.words",
            Payload::Speech(_) => "tts.frame",
            Payload::Pcm(_) => "pcm.chunk",
            Payload::Control(c) => c.kind.log_kind(),
            Payload::Telemetry(t) => t.log_kind(),
        }
    }
}

/// 10 ms of microphone audio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioChunk {
    pub index: u64,
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    /// Capture start of the first sample.
    pub start: Nanos,
    /// Trailing chunk that was zero-padded to full length.
    pub padded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelFrame {
    pub frame_index: u64,
    pub bins: Vec<f64>,
    pub normalized: bool,
    /// Capture start of the chunk that completed this frame's window.
    pub source_start: Nanos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEvent {
    pub text: String,
    pub frame_index: u64,
    pub emitted_at: Nanos,
    pub is_blank: bool,
    pub turn_id: TurnId,
}

/// Motivation and emotion of both parties, produced before the response.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateBlock {
    pub user_motivation: String,
    pub user_emotion: String,
    pub agent_motivation: String,
    pub agent_emotion: String,
}

impl StateBlock {
    /// Fields in generation order: user first, then agent.
    pub fn fields(&self) -> [(&'static str, &str); 4] {
        [
            ("user_motivation", &self.user_motivation),
            ("user_emotion", &self.user_emotion),
            ("agent_motivation", &self.agent_motivation),
            ("agent_emotion", &self.agent_emotion),
        ]
    }

    pub fn is_empty(&self) -> bool {
        self.fields().iter().all(|(_, v)| v.is_empty())
    }
}

/// One n-gram (1 to 4 words) streamed from the dialog generator to synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordChunk {
    pub words: Vec<String>,
    pub ngram_index: NgramIndex,
    pub sentence_final: bool,
    /// Last chunk of the agent turn.
    pub end_of_turn: bool,
    /// Optional per-word frame counts overriding the synthesis default.
    #[serde(default)]
    pub frame_counts: Vec<u32>,
}

impl WordChunk {
    pub fn new(words: Vec<String>, ngram_index: NgramIndex, end_of_turn: bool) -> Self {
        let sentence_final = ends_sentence(words.last().map(String::as_str).unwrap_or(""));
        Self { words, ngram_index, sentence_final, end_of_turn, frame_counts: Vec::new() }
    }
}

/// True iff the text ends with sentence-final punctuation.
pub fn ends_sentence(text: &str) -> bool {
    matches!(text.trim_end().chars().last(), Some('.' | '!' | '?'))
}

/// Simulated 40 Hz acoustic-token frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeechFrame {
    pub frame_index: u64,
    pub payload: Vec<u16>,
    pub ngram_index: NgramIndex,
    /// Frame carries phonetic content (not leading silence).
    pub phonetic: bool,
    /// First frame generated after a sentence-level cache reset.
    pub sentence_start: bool,
    /// Last frame of the agent turn.
    pub turn_final: bool,
}

/// 25 ms of 24 kHz audio: one 40 Hz frame's worth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcmChunk {
    pub samples: Vec<f32>,
    pub ngram_index: NgramIndex,
    pub produced_at: Nanos,
    pub turn_final: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    Halt,
    CacheReset,
    TurnBoundary,
    PlaybackFeedback,
}

impl ControlKind {
    pub fn log_kind(self) -> &'static str {
        match self {
            ControlKind::Halt => "control.halt",
            ControlKind::CacheReset => "control.cache_reset",
            ControlKind::TurnBoundary => "control.turn_boundary",
            ControlKind::PlaybackFeedback => "control.playback_feedback",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlSignal {
    pub kind: ControlKind,
    pub origin: String,
    pub turn_id: TurnId,
    pub ngram_index: Option<NgramIndex>,
    pub scope: Option<Vec<String>>,
}

impl ControlSignal {
    /// Halt generation for the agent turn `turn_id`.
    pub fn halt(origin: &str, turn_id: TurnId) -> Self {
        Self { kind: ControlKind::Halt, origin: origin.into(), turn_id, ngram_index: None, scope: None }
    }

    /// Floor change. `turn_id` is the turn that now holds the floor.
    pub fn turn_boundary(origin: &str, turn_id: TurnId) -> Self {
        Self { kind: ControlKind::TurnBoundary, origin: origin.into(), turn_id, ngram_index: None, scope: None }
    }

    /// Last vocalized n-gram of an interrupted turn; `-1` when nothing played.
    pub fn playback_feedback(origin: &str, turn_id: TurnId, ngram_index: NgramIndex) -> Self {
        Self {
            kind: ControlKind::PlaybackFeedback,
            origin: origin.into(),
            turn_id,
            ngram_index: Some(ngram_index.max(-1)),
            scope: None,
        }
    }

    pub fn cache_reset(origin: &str, turn_id: TurnId, scope: Vec<String>) -> Self {
        Self { kind: ControlKind::CacheReset, origin: origin.into(), turn_id, ngram_index: None, scope: Some(scope) }
    }

    /// Checks the per-kind field rules.
    pub fn is_well_formed(&self) -> bool {
        let ngram_ok = match self.kind {
            ControlKind::PlaybackFeedback => matches!(self.ngram_index, Some(i) if i >= -1),
            _ => self.ngram_index.is_none(),
        };
        let scope_ok = self.kind == ControlKind::CacheReset || self.scope.is_none();
        ngram_ok && scope_ok
    }
}

impl fmt::Display for ControlSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(turn={}, origin={}", self.kind.log_kind(), self.turn_id, self.origin)?;
        if let Some(i) = self.ngram_index {
            write!(f, ", ngram={i}")?;
        }
        f.write_str(")")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn sentence_final_detection() {
        let c = WordChunk::new(vec!["Hello".to_string(), "there.".to_string()], 0, false);
        assert!(c.sentence_final);
        let c = WordChunk::new(vec!["how".to_string()], 1, false);
        assert!(!c.sentence_final);
        assert!(ends_sentence("really?"));
        assert!(ends_sentence("wow!"));
        assert!(!ends_sentence("well,"));
    }

    #[test]
    fn control_invariants() {
        assert!(ControlSignal::halt("asr", 2).is_well_formed());
        assert!(ControlSignal::playback_feedback("player", 2, 7).is_well_formed());
        assert_eq!(ControlSignal::playback_feedback("player", 2, -5).ngram_index, Some(-1));
        let mut bad = ControlSignal::halt("asr", 2);
        bad.ngram_index = Some(3);
        assert!(!bad.is_well_formed());
    }
}
