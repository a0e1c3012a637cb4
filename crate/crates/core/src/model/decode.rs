use crate::audio::MelSpectrogram;
use crate::error::{Error, Result};
use crate::numerics::{ScanStrategy, Tape};
use crate::params::{ParamCtx, ParamStore};
use crate::ssm::{BlockParamRefs, BlockStepState, LN_EPS};
use crate::tokenizer::{TokenId, Vocab};

use super::{encoder_forward, ModelConfig};

/// Runs the encoder once and returns the contextualized features as plain
/// values, [S, d_model] row-major.
pub fn encode_features(
    store: &ParamStore,
    cfg: &ModelConfig,
    mel: &MelSpectrogram,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let ctx = ParamCtx::new(tape.clone(), store, false);
    let mel_t = tape.leaf(&[mel.frames, mel.n_mels], mel.values.clone(), false)?;
    let enc = encoder_forward(&ctx, &mel_t, cfg, ScanStrategy::Sequential)?;
    Ok(enc.to_vec())
}

struct LayerStates<'a> {
    self_refs: BlockParamRefs<'a>,
    self_state: BlockStepState,
    cross_refs: BlockParamRefs<'a>,
    cross_state: BlockStepState,
}

/// Incremental decoding session: all block states are cached so each new
/// token costs one step per block instead of a full re-evaluation. Step
/// outputs are identical to re-running the decoder on the whole prefix.
pub struct DecodeSession<'a> {
    cfg: &'a ModelConfig,
    embed: &'a [f64],
    pos_table: &'a [f64],
    ln_g: &'a [f64],
    ln_b: &'a [f64],
    head_w: &'a [f64],
    head_b: &'a [f64],
    layers: Vec<LayerStates<'a>>,
    next_pos: usize,
}

impl<'a> DecodeSession<'a> {
    /// Builds a session over precomputed encoder features ([S, d_model]);
    /// the cross blocks consume the encoder rows up front.
    pub fn new(store: &'a ParamStore, cfg: &'a ModelConfig, enc_features: &[f64]) -> Result<Self> {
        let d = cfg.d_model;
        if enc_features.len() % d != 0 {
            return Err(Error::Shape(format!(
                "encoder features length {} not a multiple of d_model {d}",
                enc_features.len()
            )));
        }
        let dims = cfg.block_dims();
        let mut layers = Vec::with_capacity(cfg.n_decoder_layers);
        for i in 0..cfg.n_decoder_layers {
            let mut cross_state = BlockStepState::new(dims);
            let cross_refs =
                BlockParamRefs::resolve(store, &format!("dec.block{i}.cross"), dims)?;
            for row in enc_features.chunks(d) {
                cross_state.step_core(&cross_refs, row);
            }
            layers.push(LayerStates {
                self_refs: BlockParamRefs::resolve(store, &format!("dec.block{i}.self"), dims)?,
                self_state: BlockStepState::new(dims),
                cross_refs,
                cross_state,
            });
        }
        Ok(Self {
            cfg,
            embed: store.slice("dec.embed")?,
            pos_table: store.slice("dec.pos")?,
            ln_g: store.slice("dec.ln_f.g")?,
            ln_b: store.slice("dec.ln_f.b")?,
            head_w: store.slice("dec.head.w")?,
            head_b: store.slice("dec.head.b")?,
            layers,
            next_pos: 0,
        })
    }

    pub fn position(&self) -> usize {
        self.next_pos
    }

    /// Feeds one token and returns the next-token logits at its position.
    pub fn step(&mut self, token: TokenId) -> Result<Vec<f64>> {
        let d = self.cfg.d_model;
        let v = self.cfg.vocab_size;
        if token as usize >= v {
            return Err(Error::Vocab(format!(
                "token id {token} out of range for vocab {v}"
            )));
        }
        if self.next_pos >= self.cfg.max_text_len {
            return Err(Error::Length {
                got: self.next_pos + 1,
                max: self.cfg.max_text_len,
            });
        }

        let erow = &self.embed[token as usize * d..(token as usize + 1) * d];
        let prow = &self.pos_table[self.next_pos * d..(self.next_pos + 1) * d];
        let mut h: Vec<f64> = erow.iter().zip(prow).map(|(e, p)| e + p).collect();
        self.next_pos += 1;

        for layer in &mut self.layers {
            h = layer.self_state.step(&layer.self_refs, &h);
            let core = layer.cross_state.step_core(&layer.cross_refs, &h);
            for (hv, cv) in h.iter_mut().zip(&core) {
                *hv += cv;
            }
        }

        // Final layer norm, then the vocab head.
        let mean = h.iter().sum::<f64>() / d as f64;
        let var = h.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        let normed: Vec<f64> = (0..d)
            .map(|i| (h[i] - mean) * inv * self.ln_g[i] + self.ln_b[i])
            .collect();
        let mut logits = vec![0.0; v];
        for (p, &nv) in normed.iter().enumerate() {
            if nv == 0.0 {
                continue;
            }
            let wrow = &self.head_w[p * v..(p + 1) * v];
            for (l, &w) in logits.iter_mut().zip(wrow) {
                *l += nv * w;
            }
        }
        for (l, &b) in logits.iter_mut().zip(self.head_b) {
            *l += b;
        }
        Ok(logits)
    }
}

/// Greedy autoregressive transcription: prime with [SOT, TASK_TRANSCRIBE],
/// take the argmax each step (ties to the lowest id), stop at EOT or when
/// the sequence reaches `max_len`. Returns content ids only.
pub fn greedy_decode(
    store: &ParamStore,
    cfg: &ModelConfig,
    vocab: &Vocab,
    mel: &MelSpectrogram,
    max_len: usize,
) -> Result<Vec<TokenId>> {
    if max_len > cfg.max_text_len {
        return Err(Error::Contract(format!(
            "max_len {max_len} exceeds model max_text_len {}",
            cfg.max_text_len
        )));
    }
    if vocab.size() > cfg.vocab_size {
        return Err(Error::Vocab(format!(
            "vocab size {} exceeds model vocab {}",
            vocab.size(),
            cfg.vocab_size
        )));
    }
    let enc = encode_features(store, cfg, mel)?;
    let mut session = DecodeSession::new(store, cfg, &enc)?;

    session.step(vocab.sot_id())?;
    let mut logits = session.step(vocab.task_transcribe_id())?;
    let mut out = Vec::new();
    loop {
        // Only real token ids compete; the model vocab may be padded past
        // the trained vocabulary.
        let next = argmax_lowest(&logits[..vocab.size()]);
        if next == vocab.eot_id() {
            break;
        }
        out.push(next);
        if session.position() >= max_len {
            break;
        }
        logits = session.step(next)?;
    }
    Ok(out)
}

fn argmax_lowest(row: &[f64]) -> TokenId {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as TokenId
}
