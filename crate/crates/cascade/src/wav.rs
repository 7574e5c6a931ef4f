//! WAV input for recorded sessions and per-turn PCM output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cascade_core::TurnId;
use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WavError {
    #[error(transparent)]
    Hound(#[from] hound::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path} is {got} Hz, the session runs at {want} Hz")]
    RateMismatch { path: PathBuf, got: u32, want: u32 },
}

/// Reads a file as mono f32 in [-1, 1], averaging channels.
pub fn read_mono(path: &Path, want_rate: u32) -> Result<Vec<f32>, WavError> {
    let mut r = WavReader::open(path)?;
    let spec = r.spec();
    if spec.sample_rate != want_rate {
        return Err(WavError::RateMismatch { path: path.into(), got: spec.sample_rate, want: want_rate });
    }
    let raw: Vec<f32> = match spec.sample_format {
        SampleFormat::Float => r.samples::<f32>().collect::<Result<_, _>>()?,
        SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f32;
            r.samples::<i32>().map(|s| s.map(|v| v as f32 / scale)).collect::<Result<_, _>>()?
        }
    };
    let ch = spec.channels.max(1) as usize;
    Ok(raw.chunks(ch).map(|c| c.iter().sum::<f32>() / ch as f32).collect())
}

/// 16-bit mono.
pub fn write_mono(path: &Path, samples: &[f32], rate: u32) -> Result<(), WavError> {
    let spec = WavSpec { channels: 1, sample_rate: rate, bits_per_sample: 16, sample_format: SampleFormat::Int };
    let mut w = WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32) as i16)?;
    }
    w.finalize()?;
    Ok(())
}

/// One file per agent turn, `turn-<id>.wav`. Returns the paths written.
pub fn write_turns(dir: &Path, pcm: &BTreeMap<TurnId, Vec<f32>>, rate: u32) -> Result<Vec<PathBuf>, WavError> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for (turn, samples) in pcm {
        let p = dir.join(format!("turn-{turn}.wav"));
        write_mono(&p, samples, rate)?;
        out.push(p);
    }
    Ok(out)
}
