//! Streaming synthesis with interleaved text and speech.
//!
//! Words arrive as n-gram chunks. Synthesis starts once 5 words are buffered
//! (or the sentence or turn ends first) and then emits 40 Hz frames, each
//! aligned to the n-gram it vocalizes. At sentence-final punctuation the
//! sentence is finished, the cache is cleared and a short prefix is
//! re-encoded so the next sentence starts on phonetic content.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::bus::Topic;
use crate::config::{PipelineConfig, TtsConfig};
use crate::dsp::fnv;
use crate::message::{ControlKind, NgramIndex, Payload, SpeechFrame, TurnId, WordChunk};
use crate::runtime::{Context, Output, Stage, StageSpec, Step, WaitPolicy};
use crate::telemetry::SampleKind;
use crate::time::{ms_f, to_ms, Nanos};

pub const STAGE: &str = "tts-stream";

/// Frames of the pause prefix re-encoded after a sentence break.
pub const PREFIX_FRAMES: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TtsError {
    NotReady { buffered: usize },
}

impl fmt::Display for TtsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TtsError::NotReady { buffered } => write!(f, "synthesis not ready with {buffered} buffered words"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TtsError {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferedWord {
    pub text: String,
    pub ngram_index: NgramIndex,
    pub frames: u32,
    pub done: u32,
    /// Last word of a sentence-final chunk.
    pub sentence_final: bool,
    pub end_of_turn: bool,
}

/// What one synthesis step produced.
#[derive(Debug, Clone, PartialEq)]
pub enum SynthStep {
    /// Prefix re-encode after a sentence break; no frame.
    Prefix {
        cost_ms: f64,
    },
    Frame {
        frame: SpeechFrame,
        cost_ms: f64,
        sentence_end: bool,
    },
}

#[derive(Debug, Clone)]
pub struct TtsState {
    cfg: TtsConfig,
    pub word_buffer: VecDeque<BufferedWord>,
    pub sentence_cache_open: bool,
    pub prefix_frames: u32,
    pub turn: TurnId,
    pub frame_index: u64,
    gate_open: bool,
    prefix_pending: bool,
    sentence_start_next: bool,
}

impl TtsState {
    pub fn new(cfg: TtsConfig) -> Self {
        Self {
            cfg,
            word_buffer: VecDeque::new(),
            sentence_cache_open: false,
            prefix_frames: 0,
            turn: 0,
            frame_index: 0,
            gate_open: false,
            prefix_pending: false,
            sentence_start_next: false,
        }
    }

    /// Drops everything and starts over for `turn`.
    pub fn begin_turn(&mut self, turn: TurnId) {
        *self = Self { turn, ..Self::new(self.cfg.clone()) };
    }

    pub fn buffered_words(&self) -> usize {
        self.word_buffer.len()
    }

    fn flush_pending(&self) -> bool {
        self.word_buffer.iter().any(|w| w.sentence_final || w.end_of_turn)
    }

    pub fn is_ready(&self) -> bool {
        !self.word_buffer.is_empty()
            && (self.gate_open || self.word_buffer.len() >= self.cfg.min_words || self.flush_pending())
    }

    /// Buffers a chunk's words and reports whether synthesis may run.
    pub fn buffer_word(&mut self, chunk: &WordChunk) -> bool {
        let n = chunk.words.len();
        for (i, w) in chunk.words.iter().enumerate() {
            let frames = match chunk.frame_counts.get(i) {
                Some(&f) if f > 0 => f,
                _ => self.cfg.frames_per_word,
            };
            let last = i + 1 == n;
            self.word_buffer.push_back(BufferedWord {
                text: w.clone(),
                ngram_index: chunk.ngram_index,
                frames,
                done: 0,
                sentence_final: last && chunk.sentence_final,
                end_of_turn: last && chunk.end_of_turn,
            });
        }
        self.is_ready()
    }

    fn payload(&self, word: &BufferedWord) -> Vec<u16> {
        let h = fnv(word.text.as_bytes());
        (0..self.cfg.payload_dims)
            .map(|d| (h.wrapping_add(word.done as u64 * 31).wrapping_add(d as u64 * 7919) % 1024) as u16)
            .collect()
    }

    /// One synthesis step: a pending prefix re-encode or the next frame.
    pub fn next_step(&mut self) -> Result<SynthStep, TtsError> {
        if !self.is_ready() {
            return Err(TtsError::NotReady { buffered: self.word_buffer.len() });
        }
        self.gate_open = true;
        if self.prefix_pending {
            self.prefix_pending = false;
            self.prefix_frames = PREFIX_FRAMES;
            self.sentence_cache_open = true;
            return Ok(SynthStep::Prefix { cost_ms: self.cfg.prefix_ms });
        }
        self.sentence_cache_open = true;
        let payload = self.payload(&self.word_buffer[0]);
        let word = &mut self.word_buffer[0];
        word.done += 1;
        let word_done = word.done >= word.frames;
        let frame = SpeechFrame {
            frame_index: self.frame_index,
            payload,
            ngram_index: word.ngram_index,
            phonetic: true,
            sentence_start: core::mem::take(&mut self.sentence_start_next),
            turn_final: word_done && word.end_of_turn,
        };
        self.frame_index += 1;
        let mut sentence_end = false;
        if word_done {
            let w = self.word_buffer.pop_front().expect("head word exists");
            if w.sentence_final && !w.end_of_turn {
                self.sentence_boundary();
                sentence_end = true;
            }
        }
        Ok(SynthStep::Frame { frame, cost_ms: self.cfg.frame_ms, sentence_end })
    }

    /// Frames for every word currently buffered, prefix steps skipped.
    pub fn synthesize(&mut self) -> Result<Vec<SpeechFrame>, TtsError> {
        if !self.is_ready() {
            return Err(TtsError::NotReady { buffered: self.word_buffer.len() });
        }
        let mut out = Vec::new();
        while let Ok(step) = self.next_step() {
            if let SynthStep::Frame { frame, .. } = step {
                out.push(frame);
            }
        }
        Ok(out)
    }

    /// Called after the last frame of a sentence: clear the cache and arm the
    /// prefix re-encode for the next sentence.
    pub fn sentence_boundary(&mut self) {
        self.sentence_cache_open = false;
        self.prefix_frames = 0;
        self.prefix_pending = true;
        self.sentence_start_next = true;
        self.gate_open = false;
    }
}

pub struct TtsStage {
    spec: StageSpec,
    state: TtsState,
    halted: Option<TurnId>,
    boundary_at: BTreeMap<TurnId, Nanos>,
    first_word_at: Option<Nanos>,
    started: bool,
}

impl TtsStage {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Self {
            spec: StageSpec {
                name: STAGE.into(),
                inputs: vec![Topic::LlmTokens, Topic::ControlSignals],
                outputs: vec![Topic::TtsFrames, Topic::TelemetrySamples],
                wait: WaitPolicy::Words(cfg.tts.min_words as u32),
                inference_ms: cfg.tts.frame_ms,
                source: false,
            },
            state: TtsState::new(cfg.tts.clone()),
            halted: None,
            boundary_at: BTreeMap::new(),
            first_word_at: None,
            started: false,
        }
    }
}

impl Stage for TtsStage {
    fn spec(&self) -> &StageSpec {
        &self.spec
    }

    fn poll(&mut self, cx: &mut dyn Context) -> Step {
        while let Some(env) = cx.recv() {
            match env.payload {
                Payload::Control(sig) => match sig.kind {
                    ControlKind::Halt => {
                        cx.log("halt.received", sig.turn_id);
                        if self.state.turn == sig.turn_id {
                            self.state.begin_turn(sig.turn_id);
                            self.halted = Some(sig.turn_id);
                        }
                    }
                    ControlKind::TurnBoundary => {
                        self.boundary_at.insert(sig.turn_id, env.produced_at);
                    }
                    _ => {}
                },
                Payload::Words(chunk) => {
                    if self.halted == Some(env.turn_id) {
                        continue;
                    }
                    if env.turn_id != self.state.turn {
                        self.state.begin_turn(env.turn_id);
                        self.first_word_at = None;
                        self.started = false;
                    }
                    self.first_word_at.get_or_insert(env.produced_at);
                    self.state.buffer_word(&chunk);
                }
                _ => {}
            }
        }
        let turn = self.state.turn;
        match self.state.next_step() {
            Err(_) => Step::Idle,
            Ok(SynthStep::Prefix { cost_ms }) => {
                cx.log("tts.prefix", turn);
                Step::Busy { duration: cx.latency(ms_f(cost_ms)), outputs: Vec::new() }
            }
            Ok(SynthStep::Frame { frame, cost_ms, sentence_end }) => {
                let now = cx.now();
                let duration = cx.latency(ms_f(cost_ms));
                let mut outputs = vec![Output::new(Topic::TtsFrames, turn, Payload::Speech(frame))];
                outputs.push(Output::latency("tts", SampleKind::Inference, cost_ms, turn));
                if !self.started {
                    self.started = true;
                    let wait = self.first_word_at.map_or(0.0, |t| to_ms(now.saturating_sub(t)));
                    outputs.push(Output::latency("tts", SampleKind::Wait, wait, turn));
                    if let Some(&b) = self.boundary_at.get(&turn) {
                        outputs.push(Output::latency("tts", SampleKind::Cumulative, to_ms(now + duration - b), turn));
                    }
                }
                if sentence_end {
                    cx.log("tts.cache_clear", turn);
                }
                Step::Busy { duration, outputs }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn chunk(words: &str, idx: NgramIndex, eot: bool) -> WordChunk {
        WordChunk::new(words.split_whitespace().map(ToString::to_string).collect(), idx, eot)
    }

    fn state() -> TtsState {
        TtsState::new(TtsConfig::default())
    }

    #[test]
    fn five_word_gate() {
        let mut s = state();
        for i in 0..4 {
            assert!(!s.buffer_word(&chunk("word", i, false)));
        }
        assert_eq!(s.next_step(), Err(TtsError::NotReady { buffered: 4 }));
        assert!(s.buffer_word(&chunk("word", 4, false)));
    }

    #[test]
    fn short_turn_flushes() {
        let mut s = state();
        s.buffer_word(&chunk("ok", 0, false));
        assert!(s.buffer_word(&chunk("thanks", 1, true)));
        assert_eq!(s.synthesize().unwrap().len(), 24);
    }

    #[test]
    fn alignment_of_five_words() {
        let mut s = state();
        for i in 0..5 {
            s.buffer_word(&chunk("w", i, false));
        }
        let frames = s.synthesize().unwrap();
        assert_eq!(frames.len(), 60);
        let idx: Vec<_> = frames.iter().map(|f| f.ngram_index).collect();
        let want: Vec<_> = (0..5).flat_map(|i| [i; 12]).collect();
        assert_eq!(idx, want);
    }

    #[test]
    fn sentence_break_reencodes_prefix() {
        let mut s = state();
        s.buffer_word(&chunk("Hello there.", 0, false));
        for i in 1..6 {
            s.buffer_word(&chunk("more", i, false));
        }
        let mut steps = Vec::new();
        while let Ok(step) = s.next_step() {
            steps.push(step);
        }
        let prefix = steps.iter().position(|s| matches!(s, SynthStep::Prefix { .. })).unwrap();
        assert_eq!(prefix, 24);
        assert!(matches!(steps[23], SynthStep::Frame { sentence_end: true, .. }));
        match &steps[25] {
            SynthStep::Frame { frame, .. } => assert!(frame.sentence_start && frame.phonetic),
            other => panic!("unexpected {other:?}"),
        }
        let frames = steps.iter().filter(|s| matches!(s, SynthStep::Frame { .. })).count();
        assert_eq!(frames, 7 * 12);
    }

    #[test]
    fn per_word_frame_counts() {
        let mut s = state();
        let mut c = chunk("a b", 0, true);
        c.frame_counts = vec![3, 0];
        s.buffer_word(&c);
        let frames = s.synthesize().unwrap();
        assert_eq!(frames.len(), 15);
        assert!(frames.last().unwrap().turn_final);
    }
}
