//! Speaker enrollment and verification scheduling.
//!
//! The first window enrolls the speaker once 3 s of audio exist. After that,
//! non-overlapping 1.5 s windows are scored against the enrolled vector, and
//! windows with too little speech skip the model entirely. Embeddings are
//! mocked as one-hot vectors keyed by the scripted speaker label.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::config::SpeakerConfig;
use crate::script::Script;
use crate::telemetry::SpeakerSample;
use crate::time::{ms, Nanos, NS_PER_MS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerWindow {
    pub start: Nanos,
    pub length_ms: u64,
    pub speech_ratio: f64,
    pub invoked: bool,
}

impl SpeakerWindow {
    pub fn end(&self) -> Nanos {
        self.start + ms(self.length_ms)
    }

    pub fn is_enrollment(&self) -> bool {
        self.start == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerLabel {
    Enrolled,
    Other,
}

impl SpeakerLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SpeakerLabel::Enrolled => "enrolled",
            SpeakerLabel::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerDecision {
    pub window: SpeakerWindow,
    pub similarity: f64,
    pub label: SpeakerLabel,
    /// Scripted speaker the mock embedding was keyed on.
    pub scripted: Option<String>,
}

impl SpeakerDecision {
    pub fn sample(&self) -> SpeakerSample {
        SpeakerSample {
            start_ms: self.window.start / NS_PER_MS,
            length_ms: self.window.length_ms,
            speech_ratio: self.window.speech_ratio,
            invoked: true,
            similarity: Some(self.similarity),
            label: Some(self.label.as_str().into()),
        }
    }
}

pub fn skipped_sample(win: &SpeakerWindow) -> SpeakerSample {
    SpeakerSample {
        start_ms: win.start / NS_PER_MS,
        length_ms: win.length_ms,
        speech_ratio: win.speech_ratio,
        invoked: false,
        similarity: None,
        label: None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpeakerError {
    NotInvoked(SpeakerWindow),
}

impl fmt::Display for SpeakerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpeakerError::NotInvoked(w) => write!(f, "window at {} ns was not invoked", w.start),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for SpeakerError {}

/// Span of the `k`-th window in ms: enrollment first, then fixed windows.
pub fn window_span(k: usize, cfg: &SpeakerConfig) -> (u64, u64) {
    if k == 0 {
        (0, cfg.enroll_ms)
    } else {
        (cfg.enroll_ms + (k as u64 - 1) * cfg.window_ms, cfg.window_ms)
    }
}

/// Builds the `k`-th window from per-frame VAD marks. Returns `None` until
/// the marks cover the whole window.
pub fn window_at(k: usize, vad: &[bool], frame_ms: u64, cfg: &SpeakerConfig) -> Option<SpeakerWindow> {
    let (start_ms, length_ms) = window_span(k, cfg);
    let (first, last) = ((start_ms / frame_ms) as usize, ((start_ms + length_ms) / frame_ms) as usize);
    if last > vad.len() || last == first {
        return None;
    }
    let speech = vad[first..last].iter().filter(|v| **v).count();
    let speech_ratio = speech as f64 / (last - first) as f64;
    let invoked = k == 0 || speech_ratio > cfg.min_speech_ratio;
    Some(SpeakerWindow { start: ms(start_ms), length_ms, speech_ratio, invoked })
}

/// All complete windows over a VAD timeline of `frame_ms` frames.
pub fn schedule_windows(vad: &[bool], frame_ms: u64, cfg: &SpeakerConfig) -> Vec<SpeakerWindow> {
    (0..).map_while(|k| window_at(k, vad, frame_ms, cfg)).collect()
}

/// Unit vector for a speaker index.
pub fn mock_embedding(index: usize, dims: usize) -> Vec<f64> {
    let mut v = vec![0.0; dims.max(1)];
    let n = v.len();
    v[index % n] = 1.0;
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Holds the enrolled embedding and scores later windows against it.
#[derive(Debug, Clone)]
pub struct Diarizer {
    cfg: SpeakerConfig,
    enrolled: Option<Vec<f64>>,
    invocations: usize,
}

impl Diarizer {
    pub fn new(cfg: SpeakerConfig) -> Self {
        Self { cfg, enrolled: None, invocations: 0 }
    }

    pub fn invocations(&self) -> usize {
        self.invocations
    }

    pub fn is_enrolled(&self) -> bool {
        self.enrolled.is_some()
    }

    /// Embeds the window's majority speaker and compares it with the
    /// enrolled vector. The enrollment window enrolls and scores 1.0.
    pub fn embed_and_decide(
        &mut self,
        win: &SpeakerWindow,
        script: &dyn Script,
    ) -> Result<SpeakerDecision, SpeakerError> {
        if !win.invoked {
            return Err(SpeakerError::NotInvoked(win.clone()));
        }
        self.invocations += 1;
        let scripted = script.majority_speaker(win.start, win.end());
        let index = script.speaker_index(scripted.as_deref().unwrap_or(""));
        let emb = mock_embedding(index, self.cfg.dims);
        let enrolled = self.enrolled.get_or_insert_with(|| emb.clone());
        let similarity = cosine(enrolled, &emb);
        let label = if similarity >= self.cfg.threshold { SpeakerLabel::Enrolled } else { SpeakerLabel::Other };
        Ok(SpeakerDecision { window: win.clone(), similarity, label, scripted })
    }
}

/// Incremental scheduler used inside the recognizer worker.
#[derive(Debug, Clone)]
pub struct SpeakerTracker {
    cfg: SpeakerConfig,
    diarizer: Diarizer,
    next: usize,
}

impl SpeakerTracker {
    pub fn new(cfg: SpeakerConfig) -> Self {
        Self { diarizer: Diarizer::new(cfg.clone()), cfg, next: 0 }
    }

    pub fn diarizer(&self) -> &Diarizer {
        &self.diarizer
    }

    /// Scores every window completed by the VAD marks so far.
    pub fn advance(&mut self, vad: &[bool], frame_ms: u64, script: &dyn Script) -> Vec<SpeakerSample> {
        let mut out = Vec::new();
        if !self.cfg.enabled {
            return out;
        }
        while let Some(win) = window_at(self.next, vad, frame_ms, &self.cfg) {
            self.next += 1;
            out.push(match self.diarizer.embed_and_decide(&win, script) {
                Ok(d) => d.sample(),
                Err(_) => skipped_sample(&win),
            });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::script::{ScenarioTrace, TimedWord, UserUtterance};

    fn cfg() -> SpeakerConfig {
        SpeakerConfig::default()
    }

    #[test]
    fn six_second_session() {
        let vad = vec![true; 600];
        let w = schedule_windows(&vad, 10, &cfg());
        let spans: Vec<_> = w.iter().map(|w| (w.start / NS_PER_MS, w.length_ms)).collect();
        assert_eq!(spans, [(0, 3000), (3000, 1500), (4500, 1500)]);
    }

    #[test]
    fn enrollment_incomplete() {
        assert!(schedule_windows(&[true; 290], 10, &cfg()).is_empty());
    }

    #[test]
    fn silent_window_is_skipped_but_enrollment_is_not() {
        let w = schedule_windows(&[false; 450], 10, &cfg());
        assert!(w[0].invoked);
        assert!(!w[1].invoked);
    }

    #[test]
    fn twenty_percent_is_not_enough() {
        let mut vad = vec![false; 450];
        vad[300..330].iter_mut().for_each(|v| *v = true);
        assert_eq!(schedule_windows(&vad, 10, &cfg())[1].speech_ratio, 0.2);
        assert!(!schedule_windows(&vad, 10, &cfg())[1].invoked);
        vad[330] = true;
        assert!(schedule_windows(&vad, 10, &cfg())[1].invoked);
    }

    fn two_speakers() -> impl Script {
        let utt = |speaker: &str, start: u64| UserUtterance {
            speaker: speaker.into(),
            words: vec![TimedWord { text: "word".into(), start_ms: start, end_ms: start + 1000 }],
        };
        ScenarioTrace { user_turns: vec![utt("alice", 500), utt("bob", 3200)], ..Default::default() }.compile(0)
    }

    #[test]
    fn same_and_orthogonal_speakers() {
        let script = two_speakers();
        let mut d = Diarizer::new(cfg());
        let enroll = SpeakerWindow { start: 0, length_ms: 3000, speech_ratio: 0.33, invoked: true };
        let e = d.embed_and_decide(&enroll, &script).unwrap();
        assert_eq!((e.similarity, e.label), (1.0, SpeakerLabel::Enrolled));
        let other = SpeakerWindow { start: ms(3000), length_ms: 1500, speech_ratio: 0.66, invoked: true };
        let o = d.embed_and_decide(&other, &script).unwrap();
        assert_eq!((o.similarity, o.label), (0.0, SpeakerLabel::Other));
        let skipped = SpeakerWindow { invoked: false, ..other };
        assert!(matches!(d.embed_and_decide(&skipped, &script), Err(SpeakerError::NotInvoked(_))));
        assert_eq!(d.invocations(), 2);
    }
}
