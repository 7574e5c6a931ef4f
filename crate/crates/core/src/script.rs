//! Scenario traces: scripted user speech and scripted agent output that stand
//! in for live audio and model predictions.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::message::StateBlock;
use crate::time::{ms, Nanos};

pub const SCHEMA_VERSION: u32 = 1;

/// Word length used when an interruption lists words without timings.
pub const INTERRUPTION_WORD_MS: u64 = 250;
pub const INTERRUPTION_GAP_MS: u64 = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedWord {
    pub text: String,
    pub start_ms: u64,
    pub end_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserUtterance {
    #[serde(default = "default_speaker")]
    pub speaker: String,
    pub words: Vec<TimedWord>,
}

fn default_speaker() -> String {
    "user".into()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentScript {
    #[serde(default)]
    pub state: Option<StateBlock>,
    /// Response text; split into one-word n-grams unless `ngrams` is given.
    #[serde(default)]
    pub response: String,
    /// Explicit n-gram segmentation, 1 to 4 words each.
    #[serde(default)]
    pub ngrams: Vec<String>,
    /// Per-word synthesis frame counts.
    #[serde(default)]
    pub frame_counts: Vec<u32>,
}

impl AgentScript {
    /// The response as n-grams of words.
    pub fn segments(&self) -> Vec<Vec<String>> {
        if self.ngrams.is_empty() {
            self.response.split_whitespace().map(|w| alloc::vec![w.to_string()]).collect()
        } else {
            self.ngrams
                .iter()
                .map(|g| g.split_whitespace().map(String::from).collect::<Vec<_>>())
                .filter(|g| !g.is_empty())
                .collect()
        }
    }

    pub fn word_count(&self) -> usize {
        self.segments().iter().map(Vec::len).sum()
    }
}

/// User speech that starts while the agent holds the floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interruption {
    pub at_ms: u64,
    pub words: Vec<String>,
    #[serde(default = "default_speaker")]
    pub speaker: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTrace {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    /// Session audio length; derived from the last event plus a tail when absent.
    #[serde(default)]
    pub duration_ms: Option<u64>,
    #[serde(default)]
    pub user_turns: Vec<UserUtterance>,
    /// One entry per agent turn, in order of turn boundaries.
    #[serde(default)]
    pub agent_turns: Vec<AgentScript>,
    #[serde(default)]
    pub interruptions: Vec<Interruption>,
    /// Optional recorded audio replayed instead of the synthetic source.
    #[serde(default)]
    pub audio_path: Option<String>,
    #[serde(skip)]
    pub audio: Option<Vec<f32>>,
}

impl Default for ScenarioTrace {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            duration_ms: None,
            user_turns: Vec::new(),
            agent_turns: Vec::new(),
            interruptions: Vec::new(),
            audio_path: None,
            audio: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceError {
    UnsupportedSchema(u32),
    InvalidTimeline { word: String, detail: String },
    InvalidNgram { turn: usize, ngram: String },
}

impl fmt::Display for TraceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceError::UnsupportedSchema(v) => write!(f, "unsupported trace schema version {v}"),
            TraceError::InvalidTimeline { word, detail } => write!(f, "invalid timeline at '{word}': {detail}"),
            TraceError::InvalidNgram { turn, ngram } => {
                write!(f, "agent turn {turn}: n-gram '{ngram}' must have 1-4 words")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TraceError {}

/// A scripted user word on the session timeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptWord {
    pub text: String,
    pub start: Nanos,
    pub end: Nanos,
    pub speaker: String,
}

/// Read access to the scripted world. Implemented by compiled traces and by
/// live sessions that append words as they arrive.
pub trait Script: Send + Sync {
    /// Words whose end time lies in `[from, to)`.
    fn words_ending_in(&self, from: Nanos, to: Nanos) -> Vec<ScriptWord>;
    /// Words overlapping `[from, to)`.
    fn words_overlapping(&self, from: Nanos, to: Nanos) -> Vec<ScriptWord>;
    /// Whether any word overlaps `[from, to)`.
    fn is_speech(&self, from: Nanos, to: Nanos) -> bool {
        !self.words_overlapping(from, to).is_empty()
    }
    /// Speaker with the largest speech overlap in `[from, to)`.
    fn majority_speaker(&self, from: Nanos, to: Nanos) -> Option<String>;
    /// Index of a speaker label in order of first appearance.
    fn speaker_index(&self, label: &str) -> usize;
    /// Script for the `ordinal`-th agent turn (0-based). Missing turns are empty.
    fn agent_reply(&self, ordinal: usize) -> AgentScript;
    /// Length of session audio, or `None` for an open-ended live session.
    fn audio_end(&self) -> Option<Nanos>;
    /// Recorded samples at the session rate, if replaying a file.
    fn recorded_audio(&self) -> Option<&[f32]> {
        None
    }
    fn seed(&self) -> u64 {
        0
    }
}

impl ScenarioTrace {
    pub fn validate(&self) -> Result<(), TraceError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(TraceError::UnsupportedSchema(self.schema_version));
        }
        for u in &self.user_turns {
            let mut prev_end = None;
            for w in &u.words {
                if w.end_ms <= w.start_ms {
                    return Err(TraceError::InvalidTimeline {
                        word: w.text.clone(),
                        detail: "end must follow start".into(),
                    });
                }
                if let Some(p) = prev_end {
                    if w.start_ms < p {
                        return Err(TraceError::InvalidTimeline {
                            word: w.text.clone(),
                            detail: alloc::format!("starts at {} ms before previous word ends at {} ms", w.start_ms, p),
                        });
                    }
                }
                prev_end = Some(w.end_ms);
            }
        }
        let all = self.timeline();
        for pair in all.windows(2) {
            if pair[1].start < pair[0].end {
                return Err(TraceError::InvalidTimeline {
                    word: pair[1].text.clone(),
                    detail: "overlaps speech from another utterance".into(),
                });
            }
        }
        for (i, a) in self.agent_turns.iter().enumerate() {
            for g in &a.ngrams {
                let n = g.split_whitespace().count();
                if !(1..=4).contains(&n) {
                    return Err(TraceError::InvalidNgram { turn: i, ngram: g.clone() });
                }
            }
        }
        Ok(())
    }

    /// All user words (utterances and interruptions) sorted by start time.
    pub fn timeline(&self) -> Vec<ScriptWord> {
        let mut words: Vec<ScriptWord> = self
            .user_turns
            .iter()
            .flat_map(|u| {
                u.words.iter().map(move |w| ScriptWord {
                    text: w.text.clone(),
                    start: ms(w.start_ms),
                    end: ms(w.end_ms),
                    speaker: u.speaker.clone(),
                })
            })
            .collect();
        for i in &self.interruptions {
            let mut t = i.at_ms;
            for w in &i.words {
                words.push(ScriptWord {
                    text: w.clone(),
                    start: ms(t),
                    end: ms(t + INTERRUPTION_WORD_MS),
                    speaker: i.speaker.clone(),
                });
                t += INTERRUPTION_WORD_MS + INTERRUPTION_GAP_MS;
            }
        }
        words.sort_by_key(|w| (w.start, w.end));
        words
    }

    /// Freezes the trace into a queryable script.
    pub fn compile(&self, tail_ms: u64) -> CompiledTrace {
        let words = self.timeline();
        let last = words.last().map_or(0, |w| w.end);
        let audio_end = match (self.duration_ms, &self.audio) {
            (Some(d), _) => ms(d),
            (None, Some(_)) => 0,
            (None, None) if words.is_empty() => 0,
            (None, None) => last + ms(tail_ms),
        };
        let mut speakers = BTreeMap::new();
        for w in &words {
            let n = speakers.len();
            speakers.entry(w.speaker.clone()).or_insert(n);
        }
        CompiledTrace {
            words,
            agent: self.agent_turns.clone(),
            audio_end,
            speakers,
            audio: self.audio.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompiledTrace {
    words: Vec<ScriptWord>,
    agent: Vec<AgentScript>,
    audio_end: Nanos,
    speakers: BTreeMap<String, usize>,
    audio: Option<Vec<f32>>,
    seed: u64,
}

impl CompiledTrace {
    pub fn words(&self) -> &[ScriptWord] {
        &self.words
    }

    /// Sets the audio length from recorded samples at `rate`.
    pub fn with_recorded_length(mut self, rate: u32) -> Self {
        if let Some(a) = &self.audio {
            let len = a.len() as u64 * 1_000_000_000 / rate as u64;
            self.audio_end = self.audio_end.max(len);
        }
        self
    }
}

pub(crate) fn overlap(a0: Nanos, a1: Nanos, b0: Nanos, b1: Nanos) -> Nanos {
    a1.min(b1).saturating_sub(a0.max(b0))
}

impl Script for CompiledTrace {
    fn words_ending_in(&self, from: Nanos, to: Nanos) -> Vec<ScriptWord> {
        self.words.iter().filter(|w| w.end >= from && w.end < to).cloned().collect()
    }

    fn words_overlapping(&self, from: Nanos, to: Nanos) -> Vec<ScriptWord> {
        self.words.iter().filter(|w| overlap(w.start, w.end, from, to) > 0).cloned().collect()
    }

    fn is_speech(&self, from: Nanos, to: Nanos) -> bool {
        self.words.iter().any(|w| overlap(w.start, w.end, from, to) > 0)
    }

    fn majority_speaker(&self, from: Nanos, to: Nanos) -> Option<String> {
        let mut by_speaker: BTreeMap<&str, Nanos> = BTreeMap::new();
        for w in &self.words {
            let o = overlap(w.start, w.end, from, to);
            if o > 0 {
                *by_speaker.entry(&w.speaker).or_default() += o;
            }
        }
        // ties go to the label that sorts first
        by_speaker.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(a.0))).map(|(s, _)| s.to_string())
    }

    fn speaker_index(&self, label: &str) -> usize {
        self.speakers.get(label).copied().unwrap_or(self.speakers.len())
    }

    fn agent_reply(&self, ordinal: usize) -> AgentScript {
        self.agent.get(ordinal).cloned().unwrap_or_default()
    }

    fn audio_end(&self) -> Option<Nanos> {
        Some(self.audio_end)
    }

    fn recorded_audio(&self) -> Option<&[f32]> {
        self.audio.as_deref()
    }

    fn seed(&self) -> u64 {
        self.seed
    }
}
