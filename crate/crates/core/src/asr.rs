//! Scripted streaming recognizer with voice activity detection.
//!
//! Mel frames are consumed in batches of 16. Each batch holds 4 stacked
//! positions of 4 frames; a position emits the scripted words whose end time
//! falls inside it, with CTC-style collapse of immediate repeats. The
//! recognizer also owns the conversational floor: it hands the floor to the
//! agent after a pause and takes it back with a Halt when the user talks over
//! the agent.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::bus::Topic;
use crate::config::{AsrConfig, PipelineConfig, Tunables};
use crate::dsp::FrameGeometry;
use crate::message::{ControlKind, ControlSignal, MelFrame, Payload, TokenEvent, TurnId};
use crate::runtime::{Context, Output, Stage, StageSpec, Step, WaitPolicy};
use crate::script::Script;
use crate::speaker::SpeakerTracker;
use crate::telemetry::{SampleKind, TelemetrySample};
use crate::time::{ms, ms_f, to_ms, Nanos};

pub const STAGE: &str = "asr";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TurnPhase {
    Idle,
    UserSpeaking,
    AgentThinking,
    AgentSpeaking,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AsrError {
    ShortBatch { got: usize, want: usize },
    Misaligned { expected: u64, got: u64 },
}

impl fmt::Display for AsrError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AsrError::ShortBatch { got, want } => write!(f, "batch of {got} frames, need {want}"),
            AsrError::Misaligned { expected, got } => write!(f, "batch starts at frame {got}, expected {expected}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for AsrError {}

#[derive(Debug, Clone, PartialEq)]
pub struct AsrState {
    pub cache_frames: u64,
    pub cap_frames: u64,
    pub silence_run_ms: u64,
    pub turn_phase: TurnPhase,
    /// Turn id of the current (or next) user turn.
    pub user_turn: TurnId,
    /// Agent turn holding the floor, if any.
    pub agent_turn: Option<TurnId>,
    /// Non-blank tokens recognized in the current user turn.
    pub user_tokens: usize,
    pub last_word_end: Option<Nanos>,
    pub forced_resets: u32,
    batch_frames: usize,
    stacking: usize,
    hop_ms: u64,
    next_frame: u64,
    /// Label of the previous stacked position; `None` is a blank.
    prev_label: Option<String>,
    silence_reset_done: bool,
}

impl AsrState {
    pub fn new(cfg: &AsrConfig, hop_ms: u64) -> Self {
        Self {
            cache_frames: 0,
            cap_frames: cfg.cache_cap_ms / hop_ms.max(1),
            silence_run_ms: 0,
            turn_phase: TurnPhase::Idle,
            user_turn: 1,
            agent_turn: None,
            user_tokens: 0,
            last_word_end: None,
            forced_resets: 0,
            batch_frames: cfg.batch_frames.max(1),
            stacking: cfg.stacking.max(1),
            hop_ms,
            next_frame: 0,
            prev_label: None,
            silence_reset_done: false,
        }
    }

    /// Recognizes one batch. `flush` permits a short final batch.
    pub fn ingest_batch(
        &mut self,
        frames: &[MelFrame],
        script: &dyn Script,
        emitted_at: Nanos,
        flush: bool,
    ) -> Result<Vec<TokenEvent>, AsrError> {
        let n = frames.len();
        if n == 0 || (n < self.batch_frames && !flush) {
            return Err(AsrError::ShortBatch { got: n, want: self.batch_frames });
        }
        for (i, f) in frames.iter().enumerate() {
            let expected = self.next_frame + i as u64;
            if f.frame_index != expected {
                return Err(AsrError::Misaligned { expected, got: f.frame_index });
            }
        }
        let first = self.next_frame;
        self.next_frame += n as u64;
        if self.cache_frames + n as u64 > self.cap_frames {
            self.cache_frames = 0;
            self.forced_resets += 1;
        }
        self.cache_frames += n as u64;

        let mut tokens = Vec::new();
        for pos in (0..n).step_by(self.stacking) {
            let f0 = first + pos as u64;
            let f1 = (f0 + self.stacking as u64).min(first + n as u64);
            let words = script.words_ending_in(ms(f0 * self.hop_ms), ms(f1 * self.hop_ms));
            if words.is_empty() {
                self.prev_label = None;
                continue;
            }
            for w in words {
                self.last_word_end = Some(self.last_word_end.map_or(w.end, |e| e.max(w.end)));
                if self.prev_label.as_deref() == Some(w.text.as_str()) {
                    continue;
                }
                self.prev_label = Some(w.text.clone());
                tokens.push(TokenEvent {
                    text: w.text,
                    frame_index: w.end / ms(self.hop_ms),
                    emitted_at,
                    is_blank: false,
                    turn_id: self.user_turn,
                });
            }
        }
        Ok(tokens)
    }

    /// Updates the silence run from per-frame speech marks.
    pub fn observe_vad(&mut self, speech: &[bool]) {
        for &s in speech {
            if s {
                self.silence_run_ms = 0;
                self.silence_reset_done = false;
            } else {
                self.silence_run_ms += self.hop_ms;
            }
        }
    }

    /// Hands the floor to the agent once the user has paused long enough.
    pub fn detect_turn_end(&mut self, pause_ms: u64) -> Option<ControlSignal> {
        if self.turn_phase != TurnPhase::UserSpeaking || self.user_tokens == 0 || self.silence_run_ms < pause_ms {
            return None;
        }
        let agent = self.user_turn + 1;
        self.agent_turn = Some(agent);
        self.turn_phase = TurnPhase::AgentThinking;
        self.user_tokens = 0;
        Some(ControlSignal::turn_boundary(STAGE, agent))
    }

    /// Takes the floor back when a real token arrives while the agent holds it.
    pub fn maybe_interrupt(&mut self, tok: &TokenEvent) -> Option<ControlSignal> {
        if tok.is_blank || !matches!(self.turn_phase, TurnPhase::AgentThinking | TurnPhase::AgentSpeaking) {
            return None;
        }
        let agent = self.agent_turn?;
        self.floor_returned(agent + 1);
        Some(ControlSignal::halt(STAGE, agent))
    }

    /// Accounts a published token to the current user turn.
    pub fn note_token(&mut self, tok: &mut TokenEvent) {
        if tok.is_blank {
            return;
        }
        if self.turn_phase == TurnPhase::Idle {
            self.turn_phase = TurnPhase::UserSpeaking;
        }
        tok.turn_id = self.user_turn;
        self.user_tokens += 1;
    }

    /// The agent's first words reached synthesis.
    pub fn agent_started(&mut self, turn: TurnId) {
        if self.turn_phase == TurnPhase::AgentThinking && self.agent_turn == Some(turn) {
            self.turn_phase = TurnPhase::AgentSpeaking;
        }
    }

    /// The agent turn ended, naturally or by Halt; `user_turn` holds the floor.
    pub fn floor_returned(&mut self, user_turn: TurnId) {
        self.turn_phase = TurnPhase::UserSpeaking;
        self.user_turn = user_turn;
        self.agent_turn = None;
        self.user_tokens = 0;
    }

    /// Drops the cache once per silence span longer than `reset_after_ms`.
    pub fn silence_cache_reset(&mut self, reset_after_ms: u64) -> bool {
        if self.silence_run_ms < reset_after_ms || self.silence_reset_done {
            return false;
        }
        self.silence_reset_done = true;
        self.cache_frames = 0;
        true
    }
}

pub struct AsrStage {
    spec: StageSpec,
    cfg: AsrConfig,
    state: AsrState,
    script: Arc<dyn Script>,
    buffer: Vec<MelFrame>,
    vad: Vec<bool>,
    speaker: SpeakerTracker,
    total_frames: Option<u64>,
    agent_downstream: bool,
    hop_ms: u64,
    tunables: Option<Arc<Tunables>>,
}

impl AsrStage {
    pub fn new(cfg: &PipelineConfig, script: Arc<dyn Script>, agent_downstream: bool) -> Self {
        let hop_ms = cfg.mel.hop_ms as u64;
        let total_frames = script.audio_end().map(|end| {
            let samples = (end as u128 * cfg.sample_rate as u128 / 1_000_000_000) as usize;
            FrameGeometry::new(&cfg.mel, cfg.sample_rate).frame_count(samples) as u64
        });
        Self {
            spec: StageSpec {
                name: STAGE.into(),
                inputs: vec![Topic::MelFrames, Topic::ControlSignals, Topic::LlmTokens],
                outputs: vec![Topic::AsrTokens, Topic::ControlSignals, Topic::TelemetrySamples],
                wait: WaitPolicy::Frames(cfg.asr.batch_frames as u32),
                inference_ms: cfg.asr.inference_ms,
                source: false,
            },
            cfg: cfg.asr.clone(),
            state: AsrState::new(&cfg.asr, hop_ms),
            script,
            buffer: Vec::with_capacity(cfg.asr.batch_frames),
            vad: Vec::new(),
            speaker: SpeakerTracker::new(cfg.speaker.clone()),
            total_frames,
            agent_downstream,
            hop_ms,
            tunables: None,
        }
    }

    /// Reads the pause threshold from `t` instead of the fixed config.
    pub fn with_tunables(mut self, t: Arc<Tunables>) -> Self {
        self.tunables = Some(t);
        self
    }

    pub fn state(&self) -> &AsrState {
        &self.state
    }

    fn batch_ready(&self) -> Option<bool> {
        if self.buffer.len() >= self.cfg.batch_frames {
            return Some(false);
        }
        let last = self.buffer.last()?.frame_index;
        (Some(last + 1) == self.total_frames).then_some(true)
    }

    fn process_batch(&mut self, cx: &mut dyn Context, flush: bool) -> Step {
        let frames = core::mem::take(&mut self.buffer);
        let duration = cx.latency(ms_f(self.cfg.inference_ms));
        let done = cx.now() + duration;
        let script = self.script.clone();

        let marks: Vec<bool> = frames
            .iter()
            .map(|f| script.is_speech(ms(f.frame_index * self.hop_ms), ms((f.frame_index + 1) * self.hop_ms)))
            .collect();
        self.vad.extend_from_slice(&marks);
        self.state.observe_vad(&marks);

        let mut outputs = Vec::new();
        let tokens = match self.state.ingest_batch(&frames, script.as_ref(), done, flush) {
            Ok(t) => t,
            Err(_) => {
                cx.log("asr.batch_rejected", self.state.user_turn);
                Vec::new()
            }
        };
        for mut tok in tokens {
            if let Some(halt) = self.state.maybe_interrupt(&tok) {
                outputs.push(Output::new(Topic::ControlSignals, halt.turn_id, Payload::Control(halt)));
            }
            self.state.note_token(&mut tok);
            outputs.push(Output::new(Topic::AsrTokens, tok.turn_id, Payload::Token(tok)));
        }
        if self.state.silence_cache_reset(self.cfg.reset_after_ms) {
            cx.log("asr.cache_reset", self.state.user_turn);
        }
        let pause_ms = self.tunables.as_ref().map_or(self.cfg.pause_ms, |t| t.pause_ms());
        if let Some(tb) = self.state.detect_turn_end(pause_ms) {
            let turn = tb.turn_id;
            outputs.push(Output::new(Topic::ControlSignals, turn, Payload::Control(tb)));
            if let Some(at) = self.state.last_word_end {
                outputs.push(Output::telemetry(TelemetrySample::LastUserWord { turn_id: turn, at }, turn));
            }
            outputs.push(Output::telemetry(TelemetrySample::Boundary { turn_id: turn, at: done }, turn));
            if !self.agent_downstream {
                self.state.floor_returned(turn + 1);
            }
        }
        for s in self.speaker.advance(&self.vad, self.hop_ms, script.as_ref()) {
            outputs.push(Output::telemetry(TelemetrySample::Speaker(s), 0));
        }
        if flush {
            // the end-of-session remainder is not a steady-state batch
            return Step::Busy { duration, outputs };
        }
        let turn = self.state.user_turn;
        outputs.push(Output::latency(STAGE, SampleKind::Wait, (frames.len() as u64 * self.hop_ms) as f64, turn));
        outputs.push(Output::latency(STAGE, SampleKind::Inference, self.cfg.inference_ms, turn));
        outputs.push(Output::latency(STAGE, SampleKind::Cumulative, to_ms(done - frames[0].source_start), turn));
        Step::Busy { duration, outputs }
    }
}

impl Stage for AsrStage {
    fn spec(&self) -> &StageSpec {
        &self.spec
    }

    fn poll(&mut self, cx: &mut dyn Context) -> Step {
        while let Some(env) = cx.recv() {
            match env.payload {
                Payload::Control(sig) if sig.kind == ControlKind::TurnBoundary && sig.origin != STAGE => {
                    if self.state.agent_turn.is_some_and(|a| a + 1 == sig.turn_id) {
                        self.state.floor_returned(sig.turn_id);
                        cx.log("asr.floor_returned", sig.turn_id);
                    }
                }
                Payload::Words(_) => self.state.agent_started(env.turn_id),
                Payload::Mel(frame) => {
                    self.buffer.push(frame);
                    if let Some(flush) = self.batch_ready() {
                        return self.process_batch(cx, flush);
                    }
                }
                _ => {}
            }
        }
        Step::Idle
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::script::{ScenarioTrace, TimedWord, UserUtterance};

    fn script(words: &[(&str, u64, u64)]) -> impl Script {
        let words = words.iter().map(|(t, s, e)| TimedWord { text: (*t).into(), start_ms: *s, end_ms: *e }).collect();
        ScenarioTrace { user_turns: vec![UserUtterance { speaker: "user".into(), words }], ..Default::default() }
            .compile(0)
    }

    fn frames(first: u64, n: usize) -> Vec<MelFrame> {
        (0..n)
            .map(|i| MelFrame { frame_index: first + i as u64, bins: vec![], normalized: true, source_start: 0 })
            .collect()
    }

    fn state() -> AsrState {
        AsrState::new(&AsrConfig::default(), 10)
    }

    #[test]
    fn blank_batch() {
        let s = script(&[("hello", 100, 200)]);
        assert!(state().ingest_batch(&frames(0, 16), &s, 0, false).unwrap().is_empty());
    }

    #[test]
    fn word_lands_in_batch_holding_its_end() {
        let s = script(&[("hello", 100, 200)]);
        let mut st = state();
        st.ingest_batch(&frames(0, 16), &s, 0, false).unwrap();
        let toks = st.ingest_batch(&frames(16, 16), &s, 0, false).unwrap();
        assert_eq!(toks.len(), 1);
        assert_eq!(toks[0].text, "hello");
        assert_eq!(toks[0].frame_index, 20);
    }

    #[test]
    fn short_and_misaligned_batches() {
        let s = script(&[]);
        let mut st = state();
        assert_eq!(st.ingest_batch(&frames(0, 10), &s, 0, false), Err(AsrError::ShortBatch { got: 10, want: 16 }));
        assert_eq!(st.ingest_batch(&frames(3, 16), &s, 0, false), Err(AsrError::Misaligned { expected: 0, got: 3 }));
        assert!(st.ingest_batch(&frames(0, 10), &s, 0, true).is_ok());
    }

    #[test]
    fn immediate_repeat_collapses() {
        let s = script(&[("no", 0, 5), ("no", 6, 12), ("no", 100, 130)]);
        let toks = state().ingest_batch(&frames(0, 16), &s, 0, false).unwrap();
        assert_eq!(toks.len(), 2);
    }

    #[test]
    fn pause_threshold() {
        let mut st = state();
        st.turn_phase = TurnPhase::UserSpeaking;
        st.user_tokens = 1;
        st.observe_vad(&[false; 9]);
        assert!(st.detect_turn_end(100).is_none());
        st.observe_vad(&[false]);
        let tb = st.detect_turn_end(100).unwrap();
        assert_eq!((tb.kind, tb.turn_id), (ControlKind::TurnBoundary, 2));
        assert_eq!(st.turn_phase, TurnPhase::AgentThinking);
    }

    #[test]
    fn interruption_only_during_agent_floor() {
        let tok = TokenEvent { text: "wait".into(), frame_index: 0, emitted_at: 0, is_blank: false, turn_id: 0 };
        let blank = TokenEvent { is_blank: true, ..tok.clone() };
        let mut st = state();
        st.turn_phase = TurnPhase::UserSpeaking;
        assert!(st.maybe_interrupt(&tok).is_none());
        st.user_tokens = 1;
        st.observe_vad(&[false; 10]);
        st.detect_turn_end(100).unwrap();
        st.agent_started(2);
        assert_eq!(st.turn_phase, TurnPhase::AgentSpeaking);
        assert!(st.maybe_interrupt(&blank).is_none());
        let halt = st.maybe_interrupt(&tok).unwrap();
        assert_eq!((halt.kind, halt.turn_id), (ControlKind::Halt, 2));
        assert_eq!((st.turn_phase, st.user_turn), (TurnPhase::UserSpeaking, 3));
    }

    #[test]
    fn silence_reset_once_per_span() {
        let mut st = state();
        st.cache_frames = 64;
        assert!(!st.silence_cache_reset(5000));
        st.observe_vad(&[false; 500]);
        assert!(st.silence_cache_reset(5000));
        assert_eq!(st.cache_frames, 0);
        assert!(!st.silence_cache_reset(5000));
    }

    #[test]
    fn cache_cap_forces_reset() {
        let s = script(&[]);
        let mut st = state();
        for b in 0..(3100 / 16) {
            st.ingest_batch(&frames(b * 16, 16), &s, 0, false).unwrap();
            assert!(st.cache_frames <= st.cap_frames);
        }
        assert_eq!(st.forced_resets, 1);
    }
}
