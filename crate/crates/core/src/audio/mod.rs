//! Audio ingestion and the log-Mel feature frontend.
//!
//! The pipeline is: decode WAV, downmix to mono, resample to 16 kHz,
//! peak-normalize into [-1, 1], pad or trim to a fixed sample count, then
//! Hann-windowed STFT power projected onto a Mel filterbank and
//! log-compressed. Every stage is a pure function of its input, so the
//! whole frontend is deterministic per file.

mod features;
mod wav;

pub use features::{log_mel, mel_filterbank, FrontendConfig, MelSpectrogram};
pub use wav::{load_wav, write_wav_pcm16};

use std::path::Path;

use crate::error::{Error, Result};

/// Mono audio in memory.
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Scales so the peak magnitude is exactly 1 (no-op on silence).
    pub fn normalize(mut self) -> Self {
        let peak = self.samples.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
        if peak > 0.0 {
            for s in &mut self.samples {
                *s /= peak;
            }
        }
        self
    }

    /// Truncates to `target` samples, or zero-pads at the end.
    pub fn pad_or_trim(mut self, target: usize) -> Self {
        self.samples.resize(target, 0.0);
        self
    }
}

const RESAMPLE_TAPS: usize = 16;
const KAISER_BETA: f64 = 8.0;

/// Band-limited resampling with a Kaiser-windowed sinc, 16 taps per side.
/// Output length is round(len * target / source).
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if !(8000..=48000).contains(&w.sample_rate) {
        return Err(Error::Contract(format!(
            "resample source rate {} outside [8000, 48000]",
            w.sample_rate
        )));
    }
    if w.sample_rate == target_rate {
        return Ok(w.clone());
    }
    let src = w.sample_rate as f64;
    let dst = target_rate as f64;
    let ratio = dst / src;
    let out_len = (w.samples.len() as f64 * ratio).round() as usize;
    // Cut off at the narrower Nyquist when downsampling.
    let cutoff = 0.5 * ratio.min(1.0);
    let taps = RESAMPLE_TAPS as f64;
    let i0_beta = bessel_i0(KAISER_BETA);

    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let center = j as f64 / ratio;
        let k_lo = (center - taps).ceil() as isize;
        let k_hi = (center + taps).floor() as isize;
        let mut acc = 0.0;
        let mut weight_sum = 0.0;
        for k in k_lo..=k_hi {
            let x = center - k as f64;
            let u = x / taps;
            let kaiser = bessel_i0(KAISER_BETA * (1.0 - u * u).max(0.0).sqrt()) / i0_beta;
            let weight = sinc(2.0 * cutoff * x) * kaiser;
            weight_sum += weight;
            if k >= 0 && (k as usize) < w.samples.len() {
                acc += weight * w.samples[k as usize];
            }
        }
        out.push(if weight_sum != 0.0 { acc / weight_sum } else { 0.0 });
    }
    Ok(Waveform::new(out, target_rate))
}

fn sinc(v: f64) -> f64 {
    if v == 0.0 {
        1.0
    } else {
        let p = std::f64::consts::PI * v;
        p.sin() / p
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < 1e-16 * sum {
            break;
        }
    }
    sum
}

/// Full ingest pipeline: load, resample to the configured rate, normalize,
/// pad or trim to the configured length.
pub fn prepare(path: &Path, cfg: &FrontendConfig) -> Result<Waveform> {
    let w = load_wav(path)?;
    let w = resample(&w, cfg.sample_rate)?;
    Ok(w.normalize().pad_or_trim(cfg.target_samples))
}

/// Ingest plus feature extraction.
pub fn features_for_file(path: &Path, cfg: &FrontendConfig) -> Result<MelSpectrogram> {
    log_mel(&prepare(path, cfg)?, cfg)
}
