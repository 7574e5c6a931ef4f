//! State-action dialog generator.
//!
//! After the floor passes to the agent, the generator first writes four state
//! fields (user motivation and emotion, then the agent's), then streams the
//! scripted response one token at a time, publishing each n-gram as soon as
//! its last word is out. The model's key-value cache is kept as an ordered
//! entry list so that rotation, full resets and truncation after an
//! interruption can be checked exactly.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::bus::Topic;
use crate::config::{DialogConfig, PipelineConfig, Tunables};
use crate::message::{ControlKind, ControlSignal, NgramIndex, Payload, StateBlock, TokenEvent, TurnId, WordChunk};
use crate::runtime::{Context, Output, Stage, StageSpec, Step, WaitPolicy};
use crate::script::{AgentScript, Script};
use crate::telemetry::SampleKind;
use crate::time::{ms_f, to_ms, Nanos};

pub const STAGE: &str = "dialog-core";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Prompt,
    UserToken,
    State,
    ResponseToken,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub kind: EntryKind,
    pub text: String,
    pub ngram_index: Option<NgramIndex>,
    pub turn_id: TurnId,
}

/// Rotating entry cache whose head (the system prompt) is pinned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogCache {
    entries: Vec<CacheEntry>,
    capacity: usize,
    pinned: usize,
    pub turns_since_reset: u32,
    pub evicted: u64,
}

impl DialogCache {
    pub fn new(capacity: usize) -> Self {
        Self { entries: Vec::new(), capacity: capacity.max(1), pinned: 0, turns_since_reset: 0, evicted: 0 }
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn pinned(&self) -> usize {
        self.pinned
    }

    fn pin(&mut self, entry: CacheEntry) {
        self.entries.insert(self.pinned, entry);
        self.pinned += 1;
        self.capacity = self.capacity.max(self.pinned + 1);
    }

    pub fn push(&mut self, entry: CacheEntry) {
        self.entries.push(entry);
        while self.entries.len() > self.capacity {
            self.entries.remove(self.pinned);
            self.evicted += 1;
        }
    }

    fn clear_unpinned(&mut self) {
        self.entries.truncate(self.pinned);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DialogPhase {
    /// The user holds the floor; tokens are encoded as they arrive.
    Listening,
    /// Generating states and response for the agent turn.
    Thinking,
    /// Response fully generated, playback still running.
    Speaking,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DialogError {
    AlreadyStarted,
    WrongPhase(DialogPhase),
    UnknownTurn(TurnId),
    FeedbackWithoutHalt(TurnId),
}

impl fmt::Display for DialogError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DialogError::AlreadyStarted => f.write_str("conversation already started"),
            DialogError::WrongPhase(p) => write!(f, "not accepted while {p:?}"),
            DialogError::UnknownTurn(t) => write!(f, "no agent turn {t}"),
            DialogError::FeedbackWithoutHalt(t) => write!(f, "feedback for turn {t}, which was not halted"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for DialogError {}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TurnRecord {
    pub halted: bool,
    pub state: StateBlock,
    /// Generated n-grams in order; truncated to the vocalized prefix after feedback.
    pub response: Vec<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct DialogCore {
    cfg: DialogConfig,
    cache: DialogCache,
    phase: DialogPhase,
    prompt_encoded: bool,
    started: bool,
    current: Option<TurnId>,
    turns: BTreeMap<TurnId, TurnRecord>,
}

impl DialogCore {
    pub fn new(cfg: DialogConfig) -> Self {
        Self {
            cache: DialogCache::new(cfg.cache_capacity),
            cfg,
            phase: DialogPhase::Listening,
            prompt_encoded: false,
            started: false,
            current: None,
            turns: BTreeMap::new(),
        }
    }

    pub fn cache(&self) -> &DialogCache {
        &self.cache
    }

    pub fn phase(&self) -> DialogPhase {
        self.phase
    }

    pub fn current_turn(&self) -> Option<TurnId> {
        self.current
    }

    pub fn turn(&self, id: TurnId) -> Option<&TurnRecord> {
        self.turns.get(&id)
    }

    /// Encodes the system prompt as pinned entries. Returns the encoding
    /// cost in ms, which is paid before the conversation starts.
    pub fn preencode_prompt(&mut self, prompt: &str) -> Result<f64, DialogError> {
        if self.prompt_encoded || self.started {
            return Err(DialogError::AlreadyStarted);
        }
        self.prompt_encoded = true;
        let mut n = 0;
        for tok in prompt.split_whitespace() {
            self.cache.pin(CacheEntry { kind: EntryKind::Prompt, text: tok.into(), ngram_index: None, turn_id: 0 });
            n += 1;
        }
        Ok(n as f64 * self.cfg.prompt_token_ms)
    }

    pub fn ingest_user_token(&mut self, tok: &TokenEvent) -> Result<(), DialogError> {
        if self.phase != DialogPhase::Listening {
            return Err(DialogError::WrongPhase(self.phase));
        }
        self.started = true;
        self.cache.push(CacheEntry {
            kind: EntryKind::UserToken,
            text: tok.text.clone(),
            ngram_index: None,
            turn_id: tok.turn_id,
        });
        Ok(())
    }

    /// The agent receives the floor for `turn`.
    pub fn begin_turn(&mut self, turn: TurnId) -> Result<(), DialogError> {
        if self.phase != DialogPhase::Listening {
            return Err(DialogError::WrongPhase(self.phase));
        }
        self.started = true;
        self.phase = DialogPhase::Thinking;
        self.current = Some(turn);
        self.turns.insert(turn, TurnRecord::default());
        Ok(())
    }

    /// Produces the state block and its generation cost in ms: one batched
    /// scaffold encode plus one step per non-empty field.
    pub fn generate_states(&mut self, reply: &AgentScript) -> (StateBlock, f64) {
        let turn = self.current.unwrap_or(0);
        let state = reply.state.clone().unwrap_or_default();
        let mut cost = self.cfg.state_scaffold_ms;
        for (name, value) in state.fields() {
            if !value.is_empty() {
                cost += self.cfg.state_field_ms;
            }
            let text = alloc::format!("{name}={value}");
            self.cache.push(CacheEntry { kind: EntryKind::State, text, ngram_index: None, turn_id: turn });
        }
        if let Some(rec) = self.turns.get_mut(&turn) {
            rec.state = state.clone();
        }
        (state, cost)
    }

    /// Appends one generated response token belonging to n-gram `ngram`.
    pub fn emit_word(&mut self, word: &str, ngram: NgramIndex) {
        let turn = self.current.unwrap_or(0);
        self.cache.push(CacheEntry {
            kind: EntryKind::ResponseToken,
            text: word.into(),
            ngram_index: Some(ngram),
            turn_id: turn,
        });
        if let Some(rec) = self.turns.get_mut(&turn) {
            let idx = ngram.max(0) as usize;
            if rec.response.len() <= idx {
                rec.response.resize(idx + 1, Vec::new());
            }
            rec.response[idx].push(word.into());
        }
    }

    pub fn finish_generation(&mut self) {
        if self.phase == DialogPhase::Thinking {
            self.phase = DialogPhase::Speaking;
        }
    }

    /// Stops the agent turn `turn`. Returns false if it is not the active turn.
    pub fn halt(&mut self, turn: TurnId) -> bool {
        if self.current != Some(turn) || self.phase == DialogPhase::Listening {
            return false;
        }
        if let Some(rec) = self.turns.get_mut(&turn) {
            rec.halted = true;
        }
        self.end_turn();
        true
    }

    /// Playback of `turn` finished without interruption.
    pub fn end_naturally(&mut self, turn: TurnId) -> bool {
        if self.current != Some(turn) || self.phase == DialogPhase::Listening {
            return false;
        }
        self.end_turn();
        true
    }

    fn end_turn(&mut self) {
        self.phase = DialogPhase::Listening;
        self.current = None;
        self.cache.turns_since_reset += 1;
    }

    /// Drops generated but unspoken response tokens of a halted turn.
    /// Returns the number of entries removed.
    pub fn apply_feedback(&mut self, turn: TurnId, ngram_index: NgramIndex) -> Result<usize, DialogError> {
        let rec = self.turns.get_mut(&turn).ok_or(DialogError::UnknownTurn(turn))?;
        if !rec.halted {
            return Err(DialogError::FeedbackWithoutHalt(turn));
        }
        rec.response.truncate((ngram_index + 1).max(0) as usize);
        let before = self.cache.entries.len();
        self.cache.entries.retain(|e| {
            !(e.kind == EntryKind::ResponseToken && e.turn_id == turn && e.ngram_index.is_some_and(|i| i > ngram_index))
        });
        Ok(before - self.cache.entries.len())
    }

    pub fn set_reset_turns(&mut self, n: u32) {
        self.cfg.reset_turns = n.max(1);
    }

    /// Clears everything but the prompt once `reset_turns` turns completed.
    pub fn maybe_full_reset(&mut self) -> bool {
        if self.cache.turns_since_reset < self.cfg.reset_turns {
            return false;
        }
        self.cache.clear_unpinned();
        self.cache.turns_since_reset = 0;
        true
    }
}

/// The scripted response as n-gram chunks.
pub fn response_chunks(reply: &AgentScript) -> Vec<WordChunk> {
    let segments = reply.segments();
    let n = segments.len();
    let mut word = 0;
    segments
        .into_iter()
        .enumerate()
        .map(|(i, words)| {
            let mut c = WordChunk::new(words, i as NgramIndex, i + 1 == n);
            if !reply.frame_counts.is_empty() {
                c.frame_counts =
                    (word..word + c.words.len()).map(|w| reply.frame_counts.get(w).copied().unwrap_or(0)).collect();
            }
            word += c.words.len();
            c
        })
        .collect()
}

struct ActiveTurn {
    turn: TurnId,
    boundary_at: Nanos,
    chunks: Vec<WordChunk>,
    chunk: usize,
    word: usize,
    states_done: bool,
    first_out: bool,
}

pub struct DialogStage {
    spec: StageSpec,
    cfg: DialogConfig,
    core: DialogCore,
    script: Arc<dyn Script>,
    ordinal: usize,
    active: Option<ActiveTurn>,
    requeued: VecDeque<TokenEvent>,
    last_token_at: Option<Nanos>,
    downstream_audio: bool,
    tunables: Option<Arc<Tunables>>,
}

impl DialogStage {
    /// `downstream_audio` tells whether a player will end turns naturally.
    pub fn new(cfg: &PipelineConfig, script: Arc<dyn Script>, downstream_audio: bool) -> Self {
        let mut core = DialogCore::new(cfg.dialog.clone());
        // charged before the session clock starts
        let _ = core.preencode_prompt(&cfg.dialog.system_prompt);
        Self {
            spec: StageSpec {
                name: STAGE.into(),
                inputs: vec![Topic::AsrTokens, Topic::ControlSignals],
                outputs: vec![Topic::LlmTokens, Topic::ControlSignals, Topic::TelemetrySamples],
                wait: WaitPolicy::Nothing,
                inference_ms: cfg.dialog.token_ms,
                source: false,
            },
            cfg: cfg.dialog.clone(),
            core,
            script,
            ordinal: 0,
            active: None,
            requeued: VecDeque::new(),
            last_token_at: None,
            downstream_audio,
            tunables: None,
        }
    }

    /// Reads the reset interval from `t` instead of the fixed config.
    pub fn with_tunables(mut self, t: Arc<Tunables>) -> Self {
        self.tunables = Some(t);
        self
    }

    pub fn core(&self) -> &DialogCore {
        &self.core
    }

    fn drain_requeued(&mut self, cx: &mut dyn Context) {
        while let Some(tok) = self.requeued.front() {
            if self.core.ingest_user_token(tok).is_err() {
                break;
            }
            cx.log("llm.encode", tok.turn_id);
            self.requeued.pop_front();
        }
    }

    fn turn_completed(&mut self, turn: TurnId, outputs: &mut Vec<Output>) {
        if let Some(t) = &self.tunables {
            self.core.set_reset_turns(t.reset_turns());
        }
        if self.core.maybe_full_reset() {
            let sig = ControlSignal::cache_reset(STAGE, turn, vec![STAGE.to_string()]);
            outputs.push(Output::new(Topic::ControlSignals, turn, Payload::Control(sig)));
        }
    }

    fn on_control(&mut self, cx: &mut dyn Context, sig: ControlSignal, now: Nanos, outputs: &mut Vec<Output>) {
        match sig.kind {
            ControlKind::TurnBoundary if sig.origin == crate::asr::STAGE => {
                if self.core.begin_turn(sig.turn_id).is_ok() {
                    let reply = self.script.agent_reply(self.ordinal);
                    self.ordinal += 1;
                    self.active = Some(ActiveTurn {
                        turn: sig.turn_id,
                        boundary_at: now,
                        chunks: response_chunks(&reply),
                        chunk: 0,
                        word: 0,
                        states_done: false,
                        first_out: false,
                    });
                }
            }
            ControlKind::TurnBoundary => {
                let agent = sig.turn_id.saturating_sub(1);
                if self.core.end_naturally(agent) {
                    self.active = None;
                    self.turn_completed(agent, outputs);
                }
            }
            ControlKind::Halt => {
                if self.core.halt(sig.turn_id) {
                    self.active = None;
                    cx.log("llm.halted", sig.turn_id);
                    self.turn_completed(sig.turn_id, outputs);
                }
            }
            ControlKind::PlaybackFeedback => {
                let k = sig.ngram_index.unwrap_or(-1);
                match self.core.apply_feedback(sig.turn_id, k) {
                    Ok(_) => cx.log("llm.truncated", sig.turn_id),
                    Err(_) => cx.log("llm.feedback_rejected", sig.turn_id),
                }
            }
            ControlKind::CacheReset => {}
        }
    }

    fn generate(&mut self, cx: &mut dyn Context, mut outputs: Vec<Output>) -> Step {
        let now = cx.now();
        let Some(active) = self.active.as_mut() else {
            return if outputs.is_empty() { Step::Idle } else { Step::emit(outputs) };
        };
        let turn = active.turn;
        if !active.states_done {
            active.states_done = true;
            let reply = self.script.agent_reply(self.ordinal - 1);
            let (state, cost) = self.core.generate_states(&reply);
            let duration = cx.latency(ms_f(cost));
            let wait = self.last_token_at.map_or(0.0, |t| to_ms(active.boundary_at.saturating_sub(t)));
            outputs.push(Output::new(Topic::TelemetrySamples, turn, Payload::State(state)));
            outputs.push(Output::latency("llm-state", SampleKind::Wait, wait, turn));
            outputs.push(Output::latency("llm-state", SampleKind::Inference, cost, turn));
            outputs.push(Output::latency(
                "llm-state",
                SampleKind::Cumulative,
                to_ms(now + duration - active.boundary_at),
                turn,
            ));
            return Step::Busy { duration, outputs };
        }
        if active.chunk < active.chunks.len() {
            let chunk = &active.chunks[active.chunk];
            let word = chunk.words[active.word].clone();
            let ngram = chunk.ngram_index;
            self.core.emit_word(&word, ngram);
            let duration = cx.latency(ms_f(self.cfg.token_ms));
            outputs.push(Output::latency("llm", SampleKind::Inference, self.cfg.token_ms, turn));
            active.word += 1;
            if active.word == chunk.words.len() {
                outputs.push(Output::new(Topic::LlmTokens, turn, Payload::Words(chunk.clone())));
                if !active.first_out {
                    active.first_out = true;
                    outputs.push(Output::latency("llm", SampleKind::Wait, 0.0, turn));
                    outputs.push(Output::latency(
                        "llm",
                        SampleKind::Cumulative,
                        to_ms(now + duration - active.boundary_at),
                        turn,
                    ));
                }
                active.chunk += 1;
                active.word = 0;
            }
            return Step::Busy { duration, outputs };
        }
        // generation finished
        let silent = active.chunks.is_empty() || !self.downstream_audio;
        self.active = None;
        self.core.finish_generation();
        cx.log("llm.done", turn);
        if silent {
            self.core.end_naturally(turn);
            let tb = ControlSignal::turn_boundary(STAGE, turn + 1);
            outputs.push(Output::new(Topic::ControlSignals, turn + 1, Payload::Control(tb)));
            self.turn_completed(turn, &mut outputs);
        }
        self.drain_requeued(cx);
        Step::emit(outputs)
    }
}

impl Stage for DialogStage {
    fn spec(&self) -> &StageSpec {
        &self.spec
    }

    fn poll(&mut self, cx: &mut dyn Context) -> Step {
        let mut outputs = Vec::new();
        // Boundaries wait for tokens delivered alongside them; the control
        // lane would otherwise open the turn before the last word lands.
        let mut boundaries = Vec::new();
        while let Some(env) = cx.recv() {
            match env.payload {
                Payload::Control(sig) if sig.kind == ControlKind::TurnBoundary => {
                    boundaries.push((sig, env.produced_at));
                }
                Payload::Control(sig) => {
                    let now = env.produced_at;
                    self.on_control(cx, sig, now, &mut outputs);
                    self.drain_requeued(cx);
                }
                Payload::Token(tok) => {
                    self.last_token_at = Some(env.produced_at);
                    self.requeued.push_back(tok);
                    self.drain_requeued(cx);
                }
                _ => {}
            }
        }
        for (sig, now) in boundaries {
            self.on_control(cx, sig, now, &mut outputs);
            self.drain_requeued(cx);
        }
        self.generate(cx, outputs)
    }
}
