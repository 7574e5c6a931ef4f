//! Pipeline configuration. Defaults reproduce the reference latency budget:
//! mel 1 ms, ASR 13 ms per 16-frame batch, state phase 560 ms, 16 ms per
//! response token, 20 ms per speech frame, 13 ms per vocoder chunk, 0.2 ms
//! playback start.

use alloc::string::String;
use core::sync::atomic::{AtomicU32, Ordering};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub sample_rate: u32,
    pub chunk_ms: u32,
    pub bus_capacity: usize,
    /// Uniform ±10% jitter on every inference latency.
    pub jitter: bool,
    /// Audio appended after the last scripted event.
    pub tail_ms: u64,
    pub mel: MelConfig,
    pub asr: AsrConfig,
    pub speaker: SpeakerConfig,
    pub dialog: DialogConfig,
    pub tts: TtsConfig,
    pub vocoder: VocoderConfig,
    pub player: PlayerConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            chunk_ms: 10,
            bus_capacity: crate::bus::DEFAULT_DATA_CAPACITY,
            jitter: false,
            tail_ms: 2_000,
            mel: MelConfig::default(),
            asr: AsrConfig::default(),
            speaker: SpeakerConfig::default(),
            dialog: DialogConfig::default(),
            tts: TtsConfig::default(),
            vocoder: VocoderConfig::default(),
            player: PlayerConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Every inference latency set to zero. Wait policies are untouched.
    pub fn zero_latency() -> Self {
        let mut c = Self::default();
        c.mel.inference_ms = 0.0;
        c.asr.inference_ms = 0.0;
        c.dialog.state_scaffold_ms = 0.0;
        c.dialog.state_field_ms = 0.0;
        c.dialog.token_ms = 0.0;
        c.tts.frame_ms = 0.0;
        c.tts.prefix_ms = 0.0;
        c.vocoder.inference_ms = 0.0;
        c.player.start_ms = 0.0;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub bins: usize,
    pub window_ms: u32,
    pub hop_ms: u32,
    pub log_floor: f64,
    pub std_floor: f64,
    pub inference_ms: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { bins: 80, window_ms: 25, hop_ms: 10, log_floor: 1e-10, std_floor: 1e-5, inference_ms: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsrConfig {
    pub batch_frames: usize,
    pub stacking: usize,
    pub inference_ms: f64,
    /// Silence that ends a user turn.
    pub pause_ms: u64,
    /// Silence after which the recognizer cache is dropped.
    pub reset_after_ms: u64,
    /// Longest context the recognizer keeps.
    pub cache_cap_ms: u64,
    /// Recorded for reference only; the simulator does not use them.
    pub experts: u32,
    pub vocabulary: u32,
}

impl Default for AsrConfig {
    fn default() -> Self {
        Self {
            batch_frames: 16,
            stacking: 4,
            inference_ms: 13.0,
            pause_ms: 100,
            reset_after_ms: 5_000,
            cache_cap_ms: 30_000,
            experts: 4,
            vocabulary: 8_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeakerConfig {
    pub enabled: bool,
    pub enroll_ms: u64,
    pub window_ms: u64,
    pub min_speech_ratio: f64,
    pub threshold: f64,
    pub dims: usize,
}

impl Default for SpeakerConfig {
    fn default() -> Self {
        Self { enabled: true, enroll_ms: 3_000, window_ms: 1_500, min_speech_ratio: 0.20, threshold: 0.5, dims: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DialogConfig {
    pub system_prompt: String,
    /// Pre-encode cost per prompt token, charged before the session starts.
    pub prompt_token_ms: f64,
    /// Batched pre-encode of the state-prompt scaffold.
    pub state_scaffold_ms: f64,
    /// Per generated state field.
    pub state_field_ms: f64,
    pub token_ms: f64,
    pub cache_capacity: usize,
    /// Full cache reset after this many completed agent turns.
    pub reset_turns: u32,
}

impl Default for DialogConfig {
    fn default() -> Self {
        Self {
            system_prompt: String::from(
                "You are a friendly voice assistant. First infer the user's motivation and emotion, \
                 then your own, then answer briefly.",
            ),
            prompt_token_ms: 0.5,
            state_scaffold_ms: 40.0,
            state_field_ms: 130.0,
            token_ms: 16.0,
            cache_capacity: 4_096,
            reset_turns: 8,
        }
    }
}

impl DialogConfig {
    pub fn state_phase_ms(&self) -> f64 {
        self.state_scaffold_ms + 4.0 * self.state_field_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtsConfig {
    pub min_words: usize,
    pub frames_per_word: u32,
    pub frame_ms: f64,
    pub prefix_ms: f64,
    pub frame_rate_hz: u32,
    pub payload_dims: usize,
}

impl Default for TtsConfig {
    fn default() -> Self {
        Self { min_words: 5, frames_per_word: 12, frame_ms: 20.0, prefix_ms: 10.0, frame_rate_hz: 40, payload_dims: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocoderConfig {
    pub inference_ms: f64,
    pub upsample: usize,
    pub output_rate: u32,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        Self { inference_ms: 13.0, upsample: 4, output_rate: 24_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlayerConfig {
    /// Audio that must be buffered before a turn starts playing.
    pub priming_ms: f64,
    /// Start latency when playback resumes from idle.
    pub start_ms: f64,
}

impl Default for PlayerConfig {
    fn default() -> Self {
        Self { priming_ms: 25.0, start_ms: 0.2 }
    }
}

/// Parameters a live session may change while stages run.
#[derive(Debug)]
pub struct Tunables {
    pause_ms: AtomicU32,
    reset_turns: AtomicU32,
}

impl Tunables {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Self {
            pause_ms: AtomicU32::new(cfg.asr.pause_ms.min(u32::MAX as u64) as u32),
            reset_turns: AtomicU32::new(cfg.dialog.reset_turns),
        }
    }

    pub fn pause_ms(&self) -> u64 {
        self.pause_ms.load(Ordering::Relaxed) as u64
    }

    pub fn set_pause_ms(&self, v: u64) {
        self.pause_ms.store(v.min(u32::MAX as u64) as u32, Ordering::Relaxed);
    }

    pub fn reset_turns(&self) -> u32 {
        self.reset_turns.load(Ordering::Relaxed)
    }

    pub fn set_reset_turns(&self, v: u32) {
        self.reset_turns.store(v.max(1), Ordering::Relaxed);
    }
}
