//! Audio frontend: 10 ms chunking, the microphone source and the log-mel stage.

mod fft;
mod mel;
mod stage;

pub use self::fft::Fft;
pub use self::mel::{
    hann, hz_to_mel, mel_to_hz, normalize_running, FrameGeometry, MelExtractor, MelFilterbank, RunningStats,
};
pub(crate) use self::stage::fnv;
pub use self::stage::{MelStage, MicStage, SyntheticVoice};

use alloc::vec::Vec;
use core::fmt;

use crate::message::AudioChunk;
use crate::time::{Nanos, NS_PER_MS};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DspError {
    /// The rate does not give a whole number of samples per chunk.
    UnsupportedRate(u32),
}

impl fmt::Display for DspError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DspError::UnsupportedRate(r) => write!(f, "{r} Hz has no integer sample count per chunk"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for DspError {}

/// Samples in one chunk of `chunk_ms` at `rate`.
pub fn samples_per_chunk(rate: u32, chunk_ms: u32) -> Result<usize, DspError> {
    let scaled = rate as u64 * chunk_ms as u64;
    if rate == 0 || !scaled.is_multiple_of(1000) {
        return Err(DspError::UnsupportedRate(rate));
    }
    Ok((scaled / 1000) as usize)
}

/// Splits audio into consecutive non-overlapping chunks. A trailing partial
/// chunk is zero-padded and flagged.
pub fn chunk_source(audio: &[f32], rate: u32, chunk_ms: u32) -> Result<Vec<AudioChunk>, DspError> {
    let n = samples_per_chunk(rate, chunk_ms)?;
    Ok(audio
        .chunks(n)
        .enumerate()
        .map(|(i, c)| {
            let mut samples = c.to_vec();
            let padded = samples.len() < n;
            samples.resize(n, 0.0);
            AudioChunk {
                index: i as u64,
                samples,
                sample_rate: rate,
                start: i as Nanos * chunk_ms as Nanos * NS_PER_MS,
                padded,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_second_is_a_hundred_chunks() {
        let chunks = chunk_source(&[0.0; 16_000], 16_000, 10).unwrap();
        assert_eq!(chunks.len(), 100);
        assert!(chunks.iter().all(|c| c.samples.len() == 160 && !c.padded));
        assert_eq!(chunks[99].start, 990 * NS_PER_MS);
    }

    #[test]
    fn short_input_is_padded() {
        let chunks = chunk_source(&[0.5; 80], 16_000, 10).unwrap();
        assert_eq!(chunks.len(), 1);
        assert!(chunks[0].padded);
        assert_eq!(chunks[0].samples.len(), 160);
        assert_eq!(chunks[0].samples[100], 0.0);
    }

    #[test]
    fn rates() {
        assert_eq!(samples_per_chunk(44_100, 10), Ok(441));
        assert_eq!(samples_per_chunk(22_050, 10), Err(DspError::UnsupportedRate(22_050)));
    }
}
