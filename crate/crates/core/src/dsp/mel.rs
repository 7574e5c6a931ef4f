//! Streaming log-mel filterbanks with running normalization.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use super::fft::Fft;
use crate::config::MelConfig;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * libm::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (libm::pow(10.0, mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale from 0 Hz to Nyquist, stored
/// sparsely as `(first_bin, weights)`.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    filters: Vec<(usize, Vec<f64>)>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let n_bins = n_fft / 2 + 1;
        let filters = (0..n_mels)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let mut first = None;
                let mut weights = Vec::new();
                for k in 0..n_bins {
                    let f = k as f64 * bin_hz;
                    let w = if f > lo && f <= mid {
                        (f - lo) / (mid - lo)
                    } else if f > mid && f < hi {
                        (hi - f) / (hi - mid)
                    } else {
                        0.0
                    };
                    if w > 0.0 {
                        first.get_or_insert(k);
                        weights.push(w);
                    } else if first.is_some() {
                        break;
                    }
                }
                (first.unwrap_or(0), weights)
            })
            .collect();
        Self { filters }
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.filters.iter().map(|(first, w)| w.iter().enumerate().map(|(i, wi)| wi * power[first + i]).sum()).collect()
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len).map(|i| 0.5 - 0.5 * libm::cos(2.0 * PI * i as f64 / len as f64)).collect()
}

/// Window and hop geometry at a given sample rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameGeometry {
    pub window: usize,
    pub hop: usize,
    pub n_fft: usize,
}

impl FrameGeometry {
    pub fn new(cfg: &MelConfig, sample_rate: u32) -> Self {
        let window = (sample_rate as u64 * cfg.window_ms as u64 / 1000) as usize;
        let hop = (sample_rate as u64 * cfg.hop_ms as u64 / 1000) as usize;
        Self { window, hop, n_fft: window.next_power_of_two() }
    }

    /// Frames produced by `samples` samples of audio.
    pub fn frame_count(&self, samples: usize) -> usize {
        if samples < self.window {
            0
        } else {
            (samples - self.window) / self.hop + 1
        }
    }
}

/// Incremental log-mel extractor. Holds at most one window of history.
#[derive(Debug, Clone)]
pub struct MelExtractor {
    geometry: FrameGeometry,
    window: Vec<f64>,
    fft: Fft,
    bank: MelFilterbank,
    log_floor: f64,
    history: Vec<f64>,
    /// Absolute index of `history[0]`.
    history_start: usize,
    next_frame: u64,
}

impl MelExtractor {
    pub fn new(cfg: &MelConfig, sample_rate: u32) -> Self {
        let geometry = FrameGeometry::new(cfg, sample_rate);
        Self {
            geometry,
            window: hann(geometry.window),
            fft: Fft::new(geometry.n_fft),
            bank: MelFilterbank::new(cfg.bins, geometry.n_fft, sample_rate),
            log_floor: cfg.log_floor,
            history: Vec::with_capacity(geometry.window * 2),
            history_start: 0,
            next_frame: 0,
        }
    }

    pub fn geometry(&self) -> FrameGeometry {
        self.geometry
    }

    /// Samples currently held for the next window.
    pub fn buffered(&self) -> usize {
        self.history.len()
    }

    /// Log-mel energies of one full window.
    pub fn frame_of(&self, segment: &[f64]) -> Vec<f64> {
        let windowed: Vec<f64> = segment.iter().zip(&self.window).map(|(s, w)| s * w).collect();
        let power = self.fft.power_spectrum(&windowed);
        self.bank.apply(&power).into_iter().map(|e| libm::log(e.max(self.log_floor))).collect()
    }

    /// Appends samples and returns `(frame_index, bins)` for every window
    /// completed by them.
    pub fn push(&mut self, samples: &[f32]) -> Vec<(u64, Vec<f64>)> {
        self.history.extend(samples.iter().map(|&s| s as f64));
        let mut out = Vec::new();
        loop {
            let start = self.next_frame as usize * self.geometry.hop;
            let offset = start - self.history_start;
            if self.history.len() < offset + self.geometry.window {
                break;
            }
            let bins = self.frame_of(&self.history[offset..offset + self.geometry.window]);
            out.push((self.next_frame, bins));
            self.next_frame += 1;
        }
        let keep_from = self.next_frame as usize * self.geometry.hop;
        let drop = (keep_from - self.history_start).min(self.history.len());
        self.history.drain(..drop);
        self.history_start += drop;
        out
    }
}

/// Per-bin streaming mean and population variance (Welford).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub count: u64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl RunningStats {
    pub fn new(bins: usize) -> Self {
        Self { count: 0, mean: vec![0.0; bins], m2: vec![0.0; bins] }
    }

    pub fn update(&mut self, frame: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((x, mean), m2) in frame.iter().zip(&mut self.mean).zip(&mut self.m2) {
            let delta = x - *mean;
            *mean += delta / n;
            *m2 += delta * (x - *mean);
        }
    }

    pub fn variance(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.mean.len()];
        }
        self.m2.iter().map(|m| m / self.count as f64).collect()
    }

    pub fn std(&self) -> Vec<f64> {
        self.variance().into_iter().map(libm::sqrt).collect()
    }
}

/// Folds `frame` into `stats`, then normalizes it with the updated
/// statistics. The current frame counts toward its own mean and std.
pub fn normalize_running(frame: &[f64], stats: &mut RunningStats, std_floor: f64) -> Vec<f64> {
    stats.update(frame);
    frame
        .iter()
        .zip(&stats.mean)
        .zip(&stats.m2)
        .map(|((x, mean), m2)| {
            let std = libm::sqrt(m2 / stats.count as f64);
            (x - mean) / std.max(std_floor)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> MelConfig {
        MelConfig::default()
    }

    #[test]
    fn geometry_at_16k_and_44k() {
        let g = FrameGeometry::new(&cfg(), 16_000);
        assert_eq!((g.window, g.hop, g.n_fft), (400, 160, 512));
        assert_eq!(g.frame_count(16_000), 98);
        let g = FrameGeometry::new(&cfg(), 44_100);
        assert_eq!((g.window, g.hop), (1102, 441));
    }

    #[test]
    fn first_chunk_yields_no_frame() {
        let mut m = MelExtractor::new(&cfg(), 16_000);
        assert!(m.push(&[0.1; 160]).is_empty());
        assert!(m.push(&[0.1; 160]).is_empty());
        assert_eq!(m.push(&[0.1; 160]).len(), 1);
        assert!(m.buffered() <= 400);
    }

    #[test]
    fn silence_gives_constant_floor_frames() {
        let mut m = MelExtractor::new(&cfg(), 16_000);
        let frames: Vec<_> = (0..20).flat_map(|_| m.push(&[0.0; 160])).collect();
        let floor = libm::log(1e-10);
        assert_eq!(frames.len(), 18);
        for (_, f) in &frames {
            assert!(f.iter().all(|v| *v == floor));
        }
    }

    #[test]
    fn running_normalization_by_hand() {
        let mut stats = RunningStats::new(1);
        assert_eq!(normalize_running(&[1.0], &mut stats, 1e-5), vec![0.0]);
        // mean 2, population std 1
        assert_eq!(normalize_running(&[3.0], &mut stats, 1e-5), vec![1.0]);
    }

    #[test]
    fn filterbank_covers_every_filter() {
        let bank = MelFilterbank::new(80, 512, 16_000);
        assert_eq!(bank.len(), 80);
        assert!(bank.filters.iter().all(|(_, w)| !w.is_empty()));
    }
}
