use crate::error::{Error, Result};

use super::Waveform;

/// Frontend configuration. The 25 ms window / 10 ms hop / 80 Mel filters
/// follow the common speech-recognition frontend; the target length is
/// configurable because desk-scale utterances are short.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub win_samples: usize,
    pub hop_samples: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub target_samples: usize,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            win_samples: 400,
            hop_samples: 160,
            n_fft: 400,
            n_mels: 80,
            target_samples: 160000,
            log_floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.win_samples > self.n_fft {
            return Err(Error::Config(format!(
                "win_samples {} exceeds n_fft {}",
                self.win_samples, self.n_fft
            )));
        }
        if self.hop_samples > self.win_samples || self.hop_samples == 0 {
            return Err(Error::Config(format!(
                "hop_samples {} must be in 1..=win_samples {}",
                self.hop_samples, self.win_samples
            )));
        }
        if self.target_samples < self.win_samples {
            return Err(Error::Config(
                "target_samples shorter than one window".into(),
            ));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        1 + (self.target_samples - self.win_samples) / self.hop_samples
    }

    /// Half the sample rate; the filterbank spans up to here.
    pub fn f_max(&self) -> f64 {
        self.sample_rate as f64 / 2.0
    }
}

/// Log-Mel features plus the framing they were computed with.
#[derive(Debug, Clone)]
pub struct MelSpectrogram {
    /// frames x n_mels, row-major.
    pub values: Vec<f64>,
    pub frames: usize,
    pub n_mels: usize,
    pub hop_samples: usize,
    pub win_samples: usize,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular Mel filterbank on the HTK scale, n_mels x (n_fft/2 + 1).
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32, f_max: f64) -> Vec<f64> {
    let n_bins = n_fft / 2 + 1;
    let mel_max = hz_to_mel(f_max);
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut bank = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            bank[m * n_bins + k] = w;
        }
    }
    bank
}

fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// One-sided power spectrum of a windowed frame, length n_fft/2 + 1.
/// Uses radix-2 FFT when n_fft is a power of two, otherwise a direct
/// table-driven DFT.
pub(crate) struct SpectrumPlan {
    n_fft: usize,
    /// cos/sin tables for the direct path, empty when using the FFT.
    cos_table: Vec<f64>,
    sin_table: Vec<f64>,
}

impl SpectrumPlan {
    pub fn new(n_fft: usize) -> Self {
        if n_fft.is_power_of_two() {
            return Self {
                n_fft,
                cos_table: Vec::new(),
                sin_table: Vec::new(),
            };
        }
        let n_bins = n_fft / 2 + 1;
        let mut cos_table = Vec::with_capacity(n_bins * n_fft);
        let mut sin_table = Vec::with_capacity(n_bins * n_fft);
        for k in 0..n_bins {
            for n in 0..n_fft {
                let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / n_fft as f64;
                cos_table.push(ang.cos());
                sin_table.push(ang.sin());
            }
        }
        Self {
            n_fft,
            cos_table,
            sin_table,
        }
    }

    pub fn power(&self, frame: &[f64], out: &mut [f64]) {
        let n_bins = self.n_fft / 2 + 1;
        debug_assert_eq!(out.len(), n_bins);
        if self.n_fft.is_power_of_two() {
            let mut re = vec![0.0; self.n_fft];
            let mut im = vec![0.0; self.n_fft];
            re[..frame.len()].copy_from_slice(frame);
            fft_in_place(&mut re, &mut im);
            for k in 0..n_bins {
                out[k] = re[k] * re[k] + im[k] * im[k];
            }
        } else {
            for k in 0..n_bins {
                let ct = &self.cos_table[k * self.n_fft..(k + 1) * self.n_fft];
                let st = &self.sin_table[k * self.n_fft..(k + 1) * self.n_fft];
                let mut re = 0.0;
                let mut im = 0.0;
                for (i, &s) in frame.iter().enumerate() {
                    re += s * ct[i];
                    im += s * st[i];
                }
                out[k] = re * re + im * im;
            }
        }
    }
}

/// Iterative radix-2 Cooley-Tukey, in place.
fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * std::f64::consts::PI / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        let mut start = 0;
        while start < n {
            let (mut cr, mut ci) = (1.0f64, 0.0f64);
            for off in 0..len / 2 {
                let a = start + off;
                let b = a + len / 2;
                let tr = re[b] * cr - im[b] * ci;
                let ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
            start += len;
        }
        len <<= 1;
    }
}

/// Hann-windowed STFT power, Mel filterbank projection, log compression,
/// and per-utterance standardization.
///
/// The waveform must already be at the configured rate and length.
pub fn log_mel(w: &Waveform, cfg: &FrontendConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::Contract(format!(
            "log_mel expects {} Hz input, got {}",
            cfg.sample_rate, w.sample_rate
        )));
    }
    if w.samples.len() != cfg.target_samples {
        return Err(Error::Contract(format!(
            "log_mel expects {} samples, got {} (pad_or_trim first)",
            cfg.target_samples,
            w.samples.len()
        )));
    }

    let frames = cfg.frames();
    let n_bins = cfg.n_fft / 2 + 1;
    let window = hann_window(cfg.win_samples);
    let bank = mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate, cfg.f_max());
    let plan = SpectrumPlan::new(cfg.n_fft);

    let mut values = vec![0.0; frames * cfg.n_mels];
    let mut frame_buf = vec![0.0; cfg.win_samples];
    let mut power = vec![0.0; n_bins];
    for f in 0..frames {
        let start = f * cfg.hop_samples;
        for (i, v) in frame_buf.iter_mut().enumerate() {
            *v = w.samples[start + i] * window[i];
        }
        plan.power(&frame_buf, &mut power);
        let row = &mut values[f * cfg.n_mels..(f + 1) * cfg.n_mels];
        for (m, out) in row.iter_mut().enumerate() {
            let filt = &bank[m * n_bins..(m + 1) * n_bins];
            let mut acc = 0.0;
            for (&p, &fw) in power.iter().zip(filt) {
                acc += p * fw;
            }
            *out = acc.max(cfg.log_floor).log10();
        }
    }

    // Standardize the whole utterance to zero mean, unit variance.
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var > 0.0 {
        let inv = 1.0 / var.sqrt();
        for v in &mut values {
            *v = (*v - mean) * inv;
        }
    } else {
        for v in &mut values {
            *v = 0.0;
        }
    }

    Ok(MelSpectrogram {
        values,
        frames,
        n_mels: cfg.n_mels,
        hop_samples: cfg.hop_samples,
        win_samples: cfg.win_samples,
    })
}
