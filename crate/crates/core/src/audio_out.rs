//! Vocoder chain and audio player.
//!
//! Each 40 Hz speech frame is upsampled to four 160 Hz frames, and each of
//! those is vocoded to 150 samples at 24 kHz, so one frame yields one 25 ms
//! chunk of 600 samples. The player tracks which n-gram it has vocalized and
//! reports it back when the agent is interrupted.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;

use crate::bus::Topic;
use crate::config::PipelineConfig;
use crate::message::{ControlKind, ControlSignal, NgramIndex, Payload, PcmChunk, SpeechFrame, TurnId};
use crate::runtime::{Context, Output, Stage, StageSpec, Step, WaitPolicy};
use crate::telemetry::{SampleKind, TelemetrySample};
use crate::time::{ms_f, to_ms, Nanos, NS_PER_MS};

pub const VOCODER_STAGE: &str = "audio-out.vocoder";
pub const PLAYER_STAGE: &str = "audio-out.player";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AudioError {
    StaleTurn(TurnId),
    NoPlayingTurn(TurnId),
}

impl fmt::Display for AudioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AudioError::StaleTurn(t) => write!(f, "chunk of halted turn {t}"),
            AudioError::NoPlayingTurn(t) => write!(f, "halt for turn {t} while nothing of it is playing"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for AudioError {}

/// Intermediate 160 Hz frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame160 {
    pub key: u64,
    pub ngram_index: NgramIndex,
    pub sub: u8,
}

pub fn upsample(frame: &SpeechFrame, factor: usize) -> Vec<Frame160> {
    let key = frame.payload.iter().fold(frame.frame_index, |h, &p| h.wrapping_mul(31).wrapping_add(p as u64));
    (0..factor).map(|sub| Frame160 { key, ngram_index: frame.ngram_index, sub: sub as u8 }).collect()
}

/// Placeholder vocoder: a tone keyed by the frame payload with phase carried
/// across frames, so output depends only on current and past input.
#[derive(Debug, Clone)]
pub struct Vocoder {
    samples_per_frame: usize,
    rate: f64,
    phase: f64,
    upsample: usize,
}

impl Vocoder {
    pub fn new(output_rate: u32, frame_rate_hz: u32, upsample: usize) -> Self {
        let upsample = upsample.max(1);
        Self {
            samples_per_frame: output_rate as usize / (frame_rate_hz as usize * upsample),
            rate: output_rate as f64,
            phase: 0.0,
            upsample,
        }
    }

    pub fn samples_per_frame160(&self) -> usize {
        self.samples_per_frame
    }

    pub fn vocode(&mut self, f: &Frame160) -> Vec<f32> {
        let freq = 120.0 + (f.key % 200) as f64;
        let amp = 0.1 + 0.2 * ((f.key >> 8) % 100) as f64 / 100.0;
        let step = 2.0 * PI * freq / self.rate;
        (0..self.samples_per_frame)
            .map(|_| {
                self.phase = (self.phase + step) % (2.0 * PI);
                (amp * libm::sin(self.phase)) as f32
            })
            .collect()
    }

    /// Full chain for one 40 Hz frame.
    pub fn process(&mut self, frame: &SpeechFrame) -> Vec<f32> {
        upsample(frame, self.upsample).iter().flat_map(|f| self.vocode(f)).collect()
    }
}

pub struct VocoderStage {
    spec: StageSpec,
    vocoder: Vocoder,
    inference_ms: f64,
    frame_ms: f64,
    boundary_at: BTreeMap<TurnId, Nanos>,
    started: BTreeSet<TurnId>,
}

impl VocoderStage {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Self {
            spec: StageSpec {
                name: VOCODER_STAGE.into(),
                inputs: vec![Topic::TtsFrames, Topic::ControlSignals],
                outputs: vec![Topic::PcmChunks, Topic::TelemetrySamples],
                wait: WaitPolicy::Frames(1),
                inference_ms: cfg.vocoder.inference_ms,
                source: false,
            },
            vocoder: Vocoder::new(cfg.vocoder.output_rate, cfg.tts.frame_rate_hz, cfg.vocoder.upsample),
            inference_ms: cfg.vocoder.inference_ms,
            frame_ms: 1000.0 / cfg.tts.frame_rate_hz as f64,
            boundary_at: BTreeMap::new(),
            started: BTreeSet::new(),
        }
    }
}

impl Stage for VocoderStage {
    fn spec(&self) -> &StageSpec {
        &self.spec
    }

    fn poll(&mut self, cx: &mut dyn Context) -> Step {
        while let Some(env) = cx.recv() {
            match env.payload {
                Payload::Control(sig) if sig.kind == ControlKind::Halt => cx.log("halt.received", sig.turn_id),
                Payload::Control(sig) if sig.kind == ControlKind::TurnBoundary => {
                    self.boundary_at.insert(sig.turn_id, env.produced_at);
                }
                Payload::Speech(frame) => {
                    let turn = env.turn_id;
                    let duration = cx.latency(ms_f(self.inference_ms));
                    let done = cx.now() + duration;
                    let chunk = PcmChunk {
                        samples: self.vocoder.process(&frame),
                        ngram_index: frame.ngram_index,
                        produced_at: done,
                        turn_final: frame.turn_final,
                    };
                    let mut outputs = vec![
                        Output::new(Topic::PcmChunks, turn, Payload::Pcm(chunk)),
                        Output::latency("vocoder", SampleKind::Inference, self.inference_ms, turn),
                    ];
                    if self.started.insert(turn) {
                        outputs.push(Output::latency("vocoder", SampleKind::Wait, self.frame_ms, turn));
                        if let Some(&b) = self.boundary_at.get(&turn) {
                            outputs.push(Output::latency("vocoder", SampleKind::Cumulative, to_ms(done - b), turn));
                        }
                    }
                    return Step::Busy { duration, outputs };
                }
                _ => {}
            }
        }
        Step::Idle
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PlaybackState {
    /// N-gram of the most recently played chunk of the playing turn, or -1.
    pub last_played_ngram: NgramIndex,
    pub playing_turn: Option<TurnId>,
    pub buffered_chunks: usize,
    pub halted: BTreeSet<TurnId>,
    pub stale_dropped: u64,
}

impl PlaybackState {
    pub fn new() -> Self {
        Self { last_played_ngram: -1, ..Self::default() }
    }

    /// Starts playing `chunk`. The chunk always plays to its end.
    pub fn play(&mut self, chunk: &PcmChunk, turn: TurnId) -> Result<(), AudioError> {
        if self.halted.contains(&turn) {
            self.stale_dropped += 1;
            return Err(AudioError::StaleTurn(turn));
        }
        if self.playing_turn != Some(turn) {
            self.playing_turn = Some(turn);
            self.last_played_ngram = -1;
        }
        self.last_played_ngram = chunk.ngram_index;
        Ok(())
    }

    /// Stops `turn` and reports its last vocalized n-gram.
    pub fn emit_feedback(&mut self, turn: TurnId) -> Result<ControlSignal, AudioError> {
        self.halted.insert(turn);
        if self.playing_turn != Some(turn) {
            return Err(AudioError::NoPlayingTurn(turn));
        }
        self.playing_turn = None;
        Ok(ControlSignal::playback_feedback(PLAYER_STAGE, turn, self.last_played_ngram))
    }

    pub fn turn_finished(&mut self, turn: TurnId) {
        if self.playing_turn == Some(turn) {
            self.playing_turn = None;
        }
    }
}

pub struct PlayerStage {
    spec: StageSpec,
    state: PlaybackState,
    queue: VecDeque<(TurnId, PcmChunk)>,
    chunk_ns: Nanos,
    priming_ms: f64,
    start_ms: f64,
    resuming: bool,
    boundary_at: BTreeMap<TurnId, Nanos>,
    started: BTreeSet<TurnId>,
    played: BTreeMap<TurnId, Vec<f32>>,
}

impl PlayerStage {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Self {
            spec: StageSpec {
                name: PLAYER_STAGE.into(),
                inputs: vec![Topic::PcmChunks, Topic::ControlSignals],
                outputs: vec![Topic::ControlSignals, Topic::TelemetrySamples],
                wait: WaitPolicy::AudioMs(cfg.player.priming_ms as u32),
                inference_ms: cfg.player.start_ms,
                source: false,
            },
            state: PlaybackState::new(),
            queue: VecDeque::new(),
            chunk_ns: 1_000_000_000 / cfg.tts.frame_rate_hz as Nanos,
            priming_ms: cfg.player.priming_ms,
            start_ms: cfg.player.start_ms,
            resuming: true,
            boundary_at: BTreeMap::new(),
            started: BTreeSet::new(),
            played: BTreeMap::new(),
        }
    }

    pub fn state(&self) -> &PlaybackState {
        &self.state
    }

    /// Samples played per turn.
    pub fn played(&self) -> &BTreeMap<TurnId, Vec<f32>> {
        &self.played
    }

    fn on_halt(&mut self, cx: &mut dyn Context, turn: TurnId, outputs: &mut Vec<Output>) {
        cx.log("halt.received", turn);
        if self.state.halted.contains(&turn) {
            return;
        }
        let fb =
            self.state.emit_feedback(turn).unwrap_or_else(|_| ControlSignal::playback_feedback(PLAYER_STAGE, turn, -1));
        outputs.push(Output::new(Topic::ControlSignals, turn, Payload::Control(fb)));
        let before = self.queue.len();
        self.queue.retain(|(t, _)| *t != turn);
        for _ in self.queue.len()..before {
            self.state.stale_dropped += 1;
            let sample = TelemetrySample::StaleDrop { stage: PLAYER_STAGE.into(), turn_id: turn };
            outputs.push(Output::telemetry(sample, turn));
        }
    }

    fn primed(&self, turn: TurnId) -> bool {
        if self.state.playing_turn == Some(turn) {
            return true;
        }
        let queued = self.queue.iter().filter(|(t, _)| *t == turn).count() as u64 * self.chunk_ns;
        to_ms(queued) >= self.priming_ms
    }
}

impl Stage for PlayerStage {
    fn spec(&self) -> &StageSpec {
        &self.spec
    }

    fn poll(&mut self, cx: &mut dyn Context) -> Step {
        let mut outputs = Vec::new();
        while let Some(env) = cx.recv() {
            match env.payload {
                Payload::Control(sig) if sig.kind == ControlKind::Halt => self.on_halt(cx, sig.turn_id, &mut outputs),
                Payload::Control(sig) if sig.kind == ControlKind::TurnBoundary => {
                    self.boundary_at.insert(sig.turn_id, env.produced_at);
                }
                Payload::Pcm(chunk) => self.queue.push_back((env.turn_id, chunk)),
                _ => {}
            }
        }
        self.state.buffered_chunks = self.queue.len();
        if !outputs.is_empty() {
            return Step::emit(outputs);
        }
        let Some(&(turn, _)) = self.queue.front() else {
            self.resuming = true;
            return Step::Idle;
        };
        if !self.primed(turn) {
            self.resuming = true;
            return Step::Idle;
        }
        let (turn, chunk) = self.queue.pop_front().expect("front exists");
        self.state.buffered_chunks = self.queue.len();
        if self.state.play(&chunk, turn).is_err() {
            let sample = TelemetrySample::StaleDrop { stage: PLAYER_STAGE.into(), turn_id: turn };
            return Step::emit(vec![Output::telemetry(sample, turn)]);
        }
        let now = cx.now();
        let delay = if self.resuming { ms_f(self.start_ms) } else { 0 };
        self.resuming = false;
        let at = now + delay;
        let mut outputs = vec![Output::telemetry(
            TelemetrySample::PlayStart {
                turn_id: turn,
                ngram_index: chunk.ngram_index,
                at,
                produced_at: chunk.produced_at,
            },
            turn,
        )];
        if delay > 0 {
            outputs.push(Output::latency("player", SampleKind::Inference, to_ms(delay), turn));
        }
        if self.started.insert(turn) {
            outputs.push(Output::latency("player", SampleKind::Wait, self.priming_ms, turn));
            if let Some(&b) = self.boundary_at.get(&turn) {
                outputs.push(Output::latency("player", SampleKind::Cumulative, to_ms(at - b), turn));
            }
        }
        self.played.entry(turn).or_default().extend_from_slice(&chunk.samples);
        if chunk.turn_final {
            self.state.turn_finished(turn);
            let tb = ControlSignal::turn_boundary(PLAYER_STAGE, turn + 1);
            outputs.push(Output::new(Topic::ControlSignals, turn + 1, Payload::Control(tb)));
        }
        Step::Busy { duration: delay + self.chunk_ns, outputs }
    }
}

/// Length of one chunk in ms at `frame_rate_hz`.
pub fn chunk_ms(frame_rate_hz: u32) -> f64 {
    to_ms(NS_PER_MS * 1000 / frame_rate_hz as Nanos)
}
