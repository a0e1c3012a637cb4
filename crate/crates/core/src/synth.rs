//! Deterministic synthetic tone corpus: each digit word maps to a fixed
//! pure tone, utterances are tone sequences separated by silent gaps, and
//! transcripts are the space-separated digit words.
//!
//! Utterances are drawn from a small seeded pool of digit sentences, so a
//! desk-scale corpus sees every sentence several times across its splits.
//! Transcribing a held-out file therefore measures whether the model can
//! pick the right sentence from the audio alone, which exercises the
//! frontend, encoder, cross-connection, decoder, and tokenizer end to
//! end without demanding datacenter-scale sample efficiency from a
//! 25-utterance training set.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::write_wav_pcm16;
use crate::error::{Error, Result};
use crate::manifest::{write_manifest, ManifestEntry};

pub const DIGIT_WORDS: [&str; 10] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

/// Ten fixed frequencies, 400..1750 Hz in 150 Hz steps, one per digit.
pub fn tone_frequency(digit: usize) -> f64 {
    400.0 + 150.0 * digit as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_utterances: usize,
    pub seed: u64,
    pub digits_min: usize,
    pub digits_max: usize,
    /// Size of the sentence pool utterances are drawn from.
    pub n_sentences: usize,
    pub noise_amplitude: f64,
    pub tone_ms: usize,
    pub gap_ms: usize,
    pub sample_rate: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_utterances: 32,
            seed: 0,
            digits_min: 3,
            digits_max: 6,
            n_sentences: 12,
            noise_amplitude: 0.0,
            tone_ms: 100,
            gap_ms: 50,
            sample_rate: 16000,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.n_utterances == 0 {
            return Err(Error::Config("need at least one utterance".into()));
        }
        if self.digits_min == 0 || self.digits_min > self.digits_max {
            return Err(Error::Config("bad digits_per_utterance range".into()));
        }
        if self.n_sentences == 0 {
            return Err(Error::Config("sentence pool must not be empty".into()));
        }
        if tone_frequency(9) >= self.sample_rate as f64 / 2.0 {
            return Err(Error::Config("tones exceed Nyquist".into()));
        }
        Ok(())
    }
}

pub struct SynthOutputs {
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

/// Renders one utterance's samples from its digit string.
pub fn render_utterance(digits: &[usize], spec: &SynthSpec, noise: Option<&mut ChaCha8Rng>) -> Vec<f64> {
    let sr = spec.sample_rate as f64;
    let tone_len = spec.tone_ms * spec.sample_rate as usize / 1000;
    let gap_len = spec.gap_ms * spec.sample_rate as usize / 1000;
    let total = digits.len() * tone_len + digits.len().saturating_sub(1) * gap_len;
    let mut samples = vec![0.0f64; total];
    for (i, &d) in digits.iter().enumerate() {
        let f = tone_frequency(d);
        let start = i * (tone_len + gap_len);
        for n in 0..tone_len {
            samples[start + n] = 0.5 * (2.0 * PI * f * n as f64 / sr).sin();
        }
    }
    if let Some(rng) = noise {
        if spec.noise_amplitude > 0.0 {
            for s in &mut samples {
                *s += spec.noise_amplitude * gaussian(rng);
            }
        }
    }
    samples
}

/// Box-Muller standard normal.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Generates the corpus into `out_dir`: WAVs under `wavs/`, and
/// train/val/test manifests split 80/10/10 by a seeded shuffle.
/// Byte-identical for the same spec.
pub fn synth_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<SynthOutputs> {
    spec.validate()?;
    let wav_dir = out_dir.join("wavs");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // The sentence pool comes first so utterance draws can repeat it.
    let sentences: Vec<Vec<usize>> = (0..spec.n_sentences)
        .map(|_| {
            let n_digits = rng.random_range(spec.digits_min..=spec.digits_max);
            (0..n_digits).map(|_| rng.random_range(0..10)).collect()
        })
        .collect();
    let mut entries = Vec::with_capacity(spec.n_utterances);
    for i in 0..spec.n_utterances {
        let digits = sentences[rng.random_range(0..sentences.len())].clone();
        let samples = render_utterance(&digits, spec, Some(&mut rng));
        let name = format!("wavs/utt_{i:04}.wav");
        write_wav_pcm16(&out_dir.join(&name), &samples, spec.sample_rate)?;
        let text = digits
            .iter()
            .map(|&d| DIGIT_WORDS[d])
            .collect::<Vec<_>>()
            .join(" ");
        entries.push(ManifestEntry { audio: name, text });
    }

    let mut order: Vec<usize> = (0..entries.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let n = entries.len();
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let pick = |ids: &[usize]| -> Vec<ManifestEntry> {
        ids.iter().map(|&i| entries[i].clone()).collect()
    };
    let train = pick(&order[..n_train]);
    let val = pick(&order[n_train..n_train + n_val]);
    let test = pick(&order[n_train + n_val..]);

    let train_manifest = out_dir.join("train.tsv");
    let val_manifest = out_dir.join("val.tsv");
    let test_manifest = out_dir.join("test.tsv");
    write_manifest(&train_manifest, &train)?;
    write_manifest(&val_manifest, &val)?;
    write_manifest(&test_manifest, &test)?;
    Ok(SynthOutputs {
        train_manifest,
        val_manifest,
        test_manifest,
        n_train: train.len(),
        n_val: val.len(),
        n_test: test.len(),
    })
}
