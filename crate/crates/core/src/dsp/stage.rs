use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::{samples_per_chunk, DspError, MelExtractor, RunningStats};
use crate::bus::Topic;
use crate::config::PipelineConfig;
use crate::message::{AudioChunk, MelFrame, Payload};
use crate::runtime::{Context, Output, Stage, StageSpec, Step, WaitPolicy};
use crate::script::Script;
use crate::telemetry::SampleKind;
use crate::time::{ms, ms_f, to_ms, Nanos};

/// Deterministic stand-in for a voice: harmonic tones during scripted words,
/// low noise elsewhere.
#[derive(Debug, Clone)]
pub struct SyntheticVoice {
    rng: ChaCha8Rng,
    rate: u32,
}

impl SyntheticVoice {
    pub fn new(seed: u64, rate: u32) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), rate }
    }

    fn noise(&mut self) -> f64 {
        (self.rng.next_u32() as f64 / u32::MAX as f64) - 0.5
    }

    /// Renders `n` samples starting at `start`.
    pub fn render(&mut self, script: &dyn Script, start: Nanos, n: usize) -> Vec<f32> {
        let end = start + n as Nanos * 1_000_000_000 / self.rate as Nanos;
        let words = script.words_overlapping(start, end);
        (0..n)
            .map(|i| {
                let t = start + i as Nanos * 1_000_000_000 / self.rate as Nanos;
                let mut v = 0.002 * self.noise();
                if let Some(w) = words.iter().find(|w| w.start <= t && t < w.end) {
                    let f0 = 110.0 + (fnv(w.text.as_bytes()) % 120) as f64;
                    let secs = t as f64 * 1e-9;
                    let edge = (t - w.start).min(w.end - t) as f64 / 5e6;
                    let env = edge.min(1.0);
                    let tone: f64 = (1..=4).map(|h| libm::sin(2.0 * PI * f0 * h as f64 * secs) / h as f64).sum();
                    v += 0.3 * env * tone + 0.02 * self.noise();
                }
                v as f32
            })
            .collect()
    }
}

pub(crate) fn fnv(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Microphone surrogate: replays recorded audio or synthesizes the scripted
/// words, one chunk per chunk period.
pub struct MicStage {
    spec: StageSpec,
    script: Arc<dyn Script>,
    rate: u32,
    chunk_ms: u32,
    per_chunk: usize,
    next: u64,
    voice: SyntheticVoice,
}

impl MicStage {
    pub const NAME: &'static str = "mic";

    pub fn new(cfg: &PipelineConfig, script: Arc<dyn Script>) -> Result<Self, DspError> {
        let per_chunk = samples_per_chunk(cfg.sample_rate, cfg.chunk_ms)?;
        Ok(Self {
            spec: StageSpec {
                name: Self::NAME.into(),
                inputs: vec![],
                outputs: vec![Topic::AudioChunks, Topic::TelemetrySamples],
                wait: WaitPolicy::Period { ms: cfg.chunk_ms },
                inference_ms: 0.0,
                source: true,
            },
            voice: SyntheticVoice::new(script.seed(), cfg.sample_rate),
            script,
            rate: cfg.sample_rate,
            chunk_ms: cfg.chunk_ms,
            per_chunk,
            next: 0,
        })
    }

    fn render(&mut self, start: Nanos) -> (Vec<f32>, bool) {
        let n = self.per_chunk;
        if let Some(audio) = self.script.recorded_audio() {
            let from = (self.next as usize * n).min(audio.len());
            let to = (from + n).min(audio.len());
            let mut s = audio[from..to].to_vec();
            let padded = s.len() < n;
            s.resize(n, 0.0);
            return (s, padded);
        }
        let samples = self.voice.render(self.script.as_ref(), start, n);
        let padded = self.script.audio_end().is_some_and(|e| start + ms(self.chunk_ms as u64) > e);
        (samples, padded)
    }
}

impl Stage for MicStage {
    fn spec(&self) -> &StageSpec {
        &self.spec
    }

    fn poll(&mut self, cx: &mut dyn Context) -> Step {
        let period = ms(self.chunk_ms as u64);
        let start = self.next * period;
        if self.script.audio_end().is_some_and(|e| start >= e) {
            return Step::Done;
        }
        let end = start + period;
        if cx.now() < end {
            return Step::SleepUntil(end);
        }
        let (samples, padded) = self.render(start);
        let chunk = AudioChunk { index: self.next, samples, sample_rate: self.rate, start, padded };
        let mut outputs = vec![Output::new(Topic::AudioChunks, 0, Payload::Audio(chunk))];
        if self.next == 0 {
            for kind in [SampleKind::Wait, SampleKind::Inference, SampleKind::Cumulative] {
                outputs.push(Output::latency("mic", kind, 0.0, 0));
            }
        }
        self.next += 1;
        Step::emit(outputs)
    }
}

/// Log-mel filterbank stage with running normalization.
pub struct MelStage {
    spec: StageSpec,
    extractor: MelExtractor,
    stats: RunningStats,
    std_floor: f64,
    chunk_ms: u32,
}

impl MelStage {
    pub const NAME: &'static str = "mel";

    pub fn new(cfg: &PipelineConfig) -> Self {
        Self {
            spec: StageSpec {
                name: Self::NAME.into(),
                inputs: vec![Topic::AudioChunks],
                outputs: vec![Topic::MelFrames, Topic::TelemetrySamples],
                wait: WaitPolicy::Chunks(1),
                inference_ms: cfg.mel.inference_ms,
                source: false,
            },
            extractor: MelExtractor::new(&cfg.mel, cfg.sample_rate),
            stats: RunningStats::new(cfg.mel.bins),
            std_floor: cfg.mel.std_floor,
            chunk_ms: cfg.chunk_ms,
        }
    }
}

impl Stage for MelStage {
    fn spec(&self) -> &StageSpec {
        &self.spec
    }

    fn poll(&mut self, cx: &mut dyn Context) -> Step {
        while let Some(env) = cx.recv() {
            let Payload::Audio(chunk) = env.payload else { continue };
            let frames = self.extractor.push(&chunk.samples);
            if frames.is_empty() {
                continue;
            }
            let duration = cx.latency(ms_f(self.spec.inference_ms) * frames.len() as Nanos);
            let done = cx.now() + duration;
            let mut outputs = Vec::with_capacity(frames.len() * 4);
            for (frame_index, raw) in frames {
                let bins = super::normalize_running(&raw, &mut self.stats, self.std_floor);
                outputs.push(Output::new(
                    Topic::MelFrames,
                    0,
                    Payload::Mel(MelFrame { frame_index, bins, normalized: true, source_start: chunk.start }),
                ));
                outputs.push(Output::latency("mel", SampleKind::Wait, self.chunk_ms as f64, 0));
                outputs.push(Output::latency("mel", SampleKind::Inference, self.spec.inference_ms, 0));
                outputs.push(Output::latency("mel", SampleKind::Cumulative, to_ms(done - chunk.start), 0));
            }
            return Step::Busy { duration, outputs };
        }
        Step::Idle
    }
}
