//! Optimization: AdamW with decoupled weight decay, global gradient-norm
//! clipping, a linear learning-rate decay with no warmup, and the epoch
//! loop with per-epoch validation, metrics logging, and checkpointing.
//!
//! Determinism contract: for a fixed seed, parameter trajectories are
//! bit-identical across runs. Batch items run on independent tapes
//! (possibly concurrently); their gradients are reduced sequentially in
//! batch order.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{features_for_file, FrontendConfig, MelSpectrogram};
use crate::error::{Error, Result};
use crate::manifest::ManifestEntry;
use crate::model::{greedy_decode, sequence_loss, ModelConfig};
use crate::numerics::{ScanStrategy, Tape};
use crate::params::{ParamCtx, ParamStore};
use crate::tokenizer::{TokenId, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Derived when zero: epochs * batches per epoch.
    pub total_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            weight_decay: 0.01,
            adam_eps: 1e-8,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 8,
            epochs: 300,
            clip_norm: 1.0,
            seed: 0,
            total_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Linear decay to zero over the run, no warmup: lr0 * (1 - step/total).
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if cfg.total_steps == 0 || step > cfg.total_steps {
        return Err(Error::Contract(format!(
            "lr_schedule step {step} outside 0..={}",
            cfg.total_steps
        )));
    }
    Ok(cfg.lr0 * (1.0 - step as f64 / cfg.total_steps as f64))
}

/// Scales all gradients in place so the global L2 norm does not exceed
/// `max_norm`; returns the factor applied (1 when no clipping happened).
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(Error::Contract("clip_grad_norm needs max_norm > 0".into()));
    }
    let mut sq = 0.0;
    for g in grads.iter() {
        for &v in g {
            sq += v * v;
        }
    }
    if !sq.is_finite() {
        return Err(Error::Divergence("non-finite gradient norm".into()));
    }
    let norm = sq.sqrt();
    if norm <= max_norm {
        return Ok(1.0);
    }
    let factor = max_norm / norm;
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v *= factor;
        }
    }
    Ok(factor)
}

/// AdamW state: first/second moments aligned to the parameter registry
/// order, plus the shared step counter.
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            m: store.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn from_parts(m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, step: u64) -> Self {
        Self { m, v, step }
    }

    pub(crate) fn parts(&self) -> (&[Vec<f64>], &[Vec<f64>], u64) {
        (&self.m, &self.v, self.step)
    }

    /// One decoupled-weight-decay update:
    /// w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + wd * w).
    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        grads: &[Vec<f64>],
        lr: f64,
        cfg: &TrainConfig,
    ) {
        assert_eq!(grads.len(), store.len(), "gradient/parameter mismatch");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..store.len() {
            let p = store.by_index_mut(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((w, &g), (mi, vi)) in p
                .data
                .iter_mut()
                .zip(&grads[i])
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * (m_hat / (v_hat.sqrt() + cfg.adam_eps) + cfg.weight_decay * *w);
            }
        }
    }
}

/// One utterance ready for training or evaluation.
#[derive(Clone)]
pub struct TrainExample {
    pub audio: PathBuf,
    pub text: String,
    pub mel: MelSpectrogram,
    pub tokens: Vec<TokenId>,
}

/// Extracts features and wrapped token sequences for every manifest entry.
pub fn load_examples(
    entries: &[ManifestEntry],
    manifest_dir: &Path,
    fe: &FrontendConfig,
    vocab: &Vocab,
    max_text_len: usize,
) -> Result<Vec<TrainExample>> {
    entries
        .par_iter()
        .map(|e| {
            let audio = e.audio_path(manifest_dir);
            let mel = features_for_file(&audio, fe)?;
            let tokens = vocab.encode(&e.text, true);
            if tokens.len() - 1 > max_text_len {
                return Err(Error::Length {
                    got: tokens.len() - 1,
                    max: max_text_len,
                });
            }
            Ok(TrainExample {
                audio,
                text: e.text.clone(),
                mel,
                tokens,
            })
        })
        .collect()
}

fn pad_batch(batch: &[&TrainExample], pad_id: TokenId) -> Vec<Vec<TokenId>> {
    let max_len = batch.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
    batch
        .iter()
        .map(|e| {
            let mut t = e.tokens.clone();
            t.resize(max_len, pad_id);
            t
        })
        .collect()
}

/// One optimization step over a batch: teacher-forced loss and backward on
/// independent tapes, gradient reduction in batch order, clip, AdamW.
/// Returns (mean loss, pre-clip gradient norm).
pub fn train_step(
    store: &mut ParamStore,
    opt: &mut AdamW,
    batch: &[&TrainExample],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    lr: f64,
    pad_id: TokenId,
) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::Contract("train_step needs a non-empty batch".into()));
    }
    let padded = pad_batch(batch, pad_id);

    // Forward/backward each item on its own tape; merge in batch order.
    let store_ref: &ParamStore = store;
    let per_item: Vec<Result<(f64, Vec<(usize, Vec<f64>)>)>> = batch
        .par_iter()
        .zip(padded.par_iter())
        .map(|(example, tokens)| {
            let tape = Tape::new();
            let ctx = ParamCtx::new(tape.clone(), store_ref, true);
            let mel = tape.leaf(
                &[example.mel.frames, example.mel.n_mels],
                example.mel.values.clone(),
                false,
            )?;
            let loss = sequence_loss(
                &ctx,
                &mel,
                tokens,
                pad_id,
                model_cfg,
                ScanStrategy::Sequential,
            )?;
            let value = loss.scalar_value();
            if !value.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss on {}",
                    example.audio.display()
                )));
            }
            loss.backward()?;
            Ok((value, ctx.grads()))
        })
        .collect();

    let scale = 1.0 / batch.len() as f64;
    let mut grads: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.data.len()]).collect();
    let mut loss_sum = 0.0;
    for item in per_item {
        let (loss, item_grads) = item?;
        loss_sum += loss;
        for (idx, g) in item_grads {
            let acc = &mut grads[idx];
            for (a, &v) in acc.iter_mut().zip(&g) {
                *a += v * scale;
            }
        }
    }
    let mean_loss = loss_sum * scale;

    let mut sq = 0.0;
    for g in &grads {
        for &v in g {
            sq += v * v;
        }
    }
    if !sq.is_finite() {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    let grad_norm = sq.sqrt();
    clip_grad_norm(&mut grads, train_cfg.clip_norm)?;
    opt.apply(store, &grads, lr, train_cfg);
    Ok((mean_loss, grad_norm))
}

/// Mean teacher-forced loss over a set, without touching gradients.
pub fn evaluate_loss(
    store: &ParamStore,
    examples: &[TrainExample],
    model_cfg: &ModelConfig,
    pad_id: TokenId,
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(f64::NAN);
    }
    let losses: Vec<Result<f64>> = examples
        .par_iter()
        .map(|e| {
            let tape = Tape::new();
            let ctx = ParamCtx::new(tape.clone(), store, false);
            let mel = tape.leaf(&[e.mel.frames, e.mel.n_mels], e.mel.values.clone(), false)?;
            Ok(sequence_loss(
                &ctx,
                &mel,
                &e.tokens,
                pad_id,
                model_cfg,
                ScanStrategy::Sequential,
            )?
            .scalar_value())
        })
        .collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / examples.len() as f64)
}

/// Greedy-decode WER over a set, pooled over reference words.
pub fn evaluate_wer(
    store: &ParamStore,
    examples: &[TrainExample],
    model_cfg: &ModelConfig,
    vocab: &Vocab,
) -> Result<f64> {
    let rows: Vec<Result<(usize, usize)>> = examples
        .par_iter()
        .map(|e| {
            let ids = greedy_decode(store, model_cfg, vocab, &e.mel, model_cfg.max_text_len)?;
            let hyp = vocab.decode_string(&ids)?;
            let stats = crate::eval::wer_stats(&e.text, &hyp);
            Ok((stats.edits, stats.ref_words))
        })
        .collect();
    let (mut edits, mut words) = (0usize, 0usize);
    for r in rows {
        let (e, w) = r?;
        edits += e;
        words += w;
    }
    Ok(edits as f64 / words.max(1) as f64)
}

pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    pub final_train_loss: f64,
    pub first_train_loss: f64,
    pub best_val_wer: f64,
    pub metrics_path: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

pub const METRICS_HEADER: &str = "step,epoch,train_loss,val_loss,wer,lr,wall_time_s";

/// Full training run: seeded per-epoch shuffling, per-epoch validation
/// loss and greedy WER, metrics appended to CSV, `last.ckpt` each epoch
/// and `best.ckpt` at the best validation WER. On divergence the last
/// completed epoch's checkpoint is left in place.
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    store: &mut ParamStore,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    frontend: &FrontendConfig,
    vocab: &Vocab,
    train_set: &[TrainExample],
    val_set: &[TrainExample],
    out_dir: &Path,
    mut progress: Option<&mut dyn FnMut(usize, usize, f64)>,
) -> Result<TrainSummary> {
    train_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let batches_per_epoch = train_set.len().div_ceil(train_cfg.batch_size);
    let mut cfg = train_cfg.clone();
    if cfg.total_steps == 0 {
        cfg.total_steps = cfg.epochs * batches_per_epoch;
    }

    let pad_id = vocab.pad_id();
    let mut opt = AdamW::new(store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;

    let last_path = out_dir.join("last.ckpt");
    let best_path = out_dir.join("best.ckpt");
    let started = Instant::now();
    let mut global_step = 0usize;
    let mut best_wer = f64::INFINITY;
    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        let mut lr = cfg.lr0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            lr = lr_schedule(global_step, &cfg)?;
            let (loss, _norm) =
                train_step(store, &mut opt, &batch, model_cfg, &cfg, lr, pad_id)?;
            if first_loss.is_nan() {
                first_loss = loss;
            }
            last_loss = loss;
            epoch_loss += loss;
            epoch_batches += 1;
            global_step += 1;
        }
        let train_loss = epoch_loss / epoch_batches as f64;

        let val_loss = evaluate_loss(store, val_set, model_cfg, pad_id)?;
        let wer = if val_set.is_empty() {
            f64::NAN
        } else {
            evaluate_wer(store, val_set, model_cfg, vocab)?
        };

        writeln!(
            metrics,
            "{},{},{:.6},{:.6},{:.6},{:.8e},{:.3}",
            global_step,
            epoch + 1,
            train_loss,
            val_loss,
            wer,
            lr,
            started.elapsed().as_secs_f64()
        )
        .map_err(|e| Error::io(&metrics_path, e))?;

        save_checkpoint(
            &last_path,
            store,
            model_cfg,
            &cfg,
            frontend,
            Some(&opt),
            global_step as u64,
            vocab.hash(),
        )?;
        if !wer.is_nan() && wer < best_wer {
            best_wer = wer;
            save_checkpoint(
                &best_path,
                store,
                model_cfg,
                &cfg,
                frontend,
                Some(&opt),
                global_step as u64,
                vocab.hash(),
            )?;
        }
        if let Some(cb) = progress.as_mut() {
            cb(epoch + 1, global_step, train_loss);
        }
    }

    Ok(TrainSummary {
        steps: global_step,
        epochs: cfg.epochs,
        final_train_loss: last_loss,
        first_train_loss: first_loss,
        best_val_wer: best_wer,
        metrics_path,
        last_checkpoint: last_path,
        best_checkpoint: best_path,
    })
}
