//! The encoder-decoder: a convolutional stem into a stack of Mamba blocks
//! on the audio side, and a token decoder whose layers interleave
//! self blocks with cross-connections that scan over the concatenated
//! encoder and decoder sequence.
//!
//! Causality needs no mask anywhere: the scans only move left to right, so
//! a decoder position can never see a later one.

mod decode;

pub use decode::{encode_features, greedy_decode, DecodeSession};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ScanStrategy, Tensor};
use crate::params::{linear_init, ParamCtx, ParamStore};
use crate::ssm::{mamba_block, mamba_block_core, register_block_params, BlockDims};
use crate::tokenizer::TokenId;

use crate::ssm::LN_EPS;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_state: usize,
    pub d_inner: usize,
    pub conv_kernel: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub n_mels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_encoder_layers: 4,
            n_decoder_layers: 4,
            d_state: 16,
            d_inner: 128,
            conv_kernel: 4,
            vocab_size: 516,
            max_text_len: 128,
            n_mels: 80,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.d_model,
            self.n_encoder_layers,
            self.n_decoder_layers,
            self.d_state,
            self.d_inner,
            self.conv_kernel,
            self.vocab_size,
            self.max_text_len,
            self.n_mels,
        ];
        if fields.iter().any(|&v| v == 0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.max_text_len < 3 {
            return Err(Error::Config(
                "max_text_len must fit SOT + one token + EOT".into(),
            ));
        }
        Ok(())
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            d_model: self.d_model,
            d_inner: self.d_inner,
            d_state: self.d_state,
            conv_kernel: self.conv_kernel,
        }
    }

    /// Closed-form parameter count; the registry is tested to match.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let block = self.block_dims().param_count();
        let stem = (3 * self.n_mels * d + d) + (3 * d * d + d);
        let encoder = stem + self.n_encoder_layers * block + 2 * d;
        let decoder = self.vocab_size * d
            + self.max_text_len * d
            + self.n_decoder_layers * 2 * block
            + 2 * d
            + d * self.vocab_size
            + self.vocab_size;
        encoder + decoder
    }
}

/// Builds the full parameter registry. Registration order is fixed and is
/// the canonical order for the optimizer and checkpoints.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let d = cfg.d_model;
    let dims = cfg.block_dims();

    store.register(
        "enc.stem1.w",
        &[3, cfg.n_mels, d],
        linear_init(&mut rng, 3 * cfg.n_mels, 3 * cfg.n_mels * d),
    );
    store.register("enc.stem1.b", &[d], vec![0.0; d]);
    store.register(
        "enc.stem2.w",
        &[3, d, d],
        linear_init(&mut rng, 3 * d, 3 * d * d),
    );
    store.register("enc.stem2.b", &[d], vec![0.0; d]);
    for i in 0..cfg.n_encoder_layers {
        register_block_params(&mut store, &format!("enc.block{i}"), &dims, &mut rng);
    }
    store.register("enc.ln_f.g", &[d], vec![1.0; d]);
    store.register("enc.ln_f.b", &[d], vec![0.0; d]);

    store.register(
        "dec.embed",
        &[cfg.vocab_size, d],
        linear_init(&mut rng, d, cfg.vocab_size * d),
    );
    store.register(
        "dec.pos",
        &[cfg.max_text_len, d],
        linear_init(&mut rng, d, cfg.max_text_len * d),
    );
    for i in 0..cfg.n_decoder_layers {
        register_block_params(&mut store, &format!("dec.block{i}.self"), &dims, &mut rng);
        register_block_params(&mut store, &format!("dec.block{i}.cross"), &dims, &mut rng);
    }
    store.register("dec.ln_f.g", &[d], vec![1.0; d]);
    store.register("dec.ln_f.b", &[d], vec![0.0; d]);
    store.register(
        "dec.head.w",
        &[d, cfg.vocab_size],
        linear_init(&mut rng, d, d * cfg.vocab_size),
    );
    store.register("dec.head.b", &[cfg.vocab_size], vec![0.0; cfg.vocab_size]);

    debug_assert_eq!(store.total_len(), cfg.param_count());
    Ok(store)
}

/// Contextualized audio features: two conv layers (stride 1 then 2, SiLU)
/// followed by the encoder blocks and a final layer norm. Output is
/// [ceil(frames / 2), d_model].
pub fn encoder_forward(
    ctx: &ParamCtx,
    mel: &Tensor,
    cfg: &ModelConfig,
    strategy: ScanStrategy,
) -> Result<Tensor> {
    let shape = mel.shape();
    if shape.len() != 2 || shape[1] != cfg.n_mels {
        return Err(Error::Shape(format!(
            "encoder expects [frames, {}], got {shape:?}",
            cfg.n_mels
        )));
    }
    let dims = cfg.block_dims();
    let x = mel
        .conv1d(&ctx.get("enc.stem1.w")?, 1, 1)?
        .add(&ctx.get("enc.stem1.b")?)?
        .silu();
    let x = x
        .conv1d(&ctx.get("enc.stem2.w")?, 2, 1)?
        .add(&ctx.get("enc.stem2.b")?)?
        .silu();
    let mut x = x;
    for i in 0..cfg.n_encoder_layers {
        x = mamba_block(ctx, &format!("enc.block{i}"), &x, &dims, strategy)?;
    }
    x.layer_norm(&ctx.get("enc.ln_f.g")?, &ctx.get("enc.ln_f.b")?, LN_EPS)
}

/// Conditions decoder states on the encoder output: one block scans the
/// encoder sequence followed by the decoder sequence, and the decoder's
/// share of the branch output is added residually.
///
/// Every decoder position sees the whole encoder sequence plus its own
/// past; decoder causality is preserved exactly.
pub fn cross_connection(
    ctx: &ParamCtx,
    prefix: &str,
    decoder_hidden: &Tensor,
    enc: &Tensor,
    cfg: &ModelConfig,
    strategy: ScanStrategy,
) -> Result<Tensor> {
    let s = enc.shape()[0];
    let t = decoder_hidden.shape()[0];
    let z = enc.concat_rows(decoder_hidden)?;
    let core = mamba_block_core(ctx, prefix, &z, &cfg.block_dims(), strategy)?;
    decoder_hidden.add(&core.slice_rows(s, t)?)
}

/// Next-token logits for a (possibly partial) token sequence, conditioned
/// on encoder output. Softmax is left to the consumer: training feeds the
/// raw logits to the loss, decoding takes an argmax.
pub fn decoder_forward(
    ctx: &ParamCtx,
    tokens: &[TokenId],
    enc: &Tensor,
    cfg: &ModelConfig,
    strategy: ScanStrategy,
) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(Error::Contract("decoder needs at least one token".into()));
    }
    if tokens.len() > cfg.max_text_len {
        return Err(Error::Length {
            got: tokens.len(),
            max: cfg.max_text_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Vocab(format!(
            "token id {bad} out of range for vocab {}",
            cfg.vocab_size
        )));
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let emb = ctx.get("dec.embed")?.gather_rows(&ids)?;
    let pos = ctx.get("dec.pos")?.gather_rows(&positions)?;
    let mut h = emb.add(&pos)?;
    let dims = cfg.block_dims();
    for i in 0..cfg.n_decoder_layers {
        h = mamba_block(ctx, &format!("dec.block{i}.self"), &h, &dims, strategy)?;
        h = cross_connection(ctx, &format!("dec.block{i}.cross"), &h, enc, cfg, strategy)?;
    }
    let h = h.layer_norm(&ctx.get("dec.ln_f.g")?, &ctx.get("dec.ln_f.b")?, LN_EPS)?;
    h.matmul(&ctx.get("dec.head.w")?)?.add(&ctx.get("dec.head.b")?)
}

/// Teacher-forced cross entropy for one utterance: targets are the token
/// sequence shifted left by one, with `pad_id` positions ignored.
pub fn sequence_loss(
    ctx: &ParamCtx,
    mel: &Tensor,
    wrapped_tokens: &[TokenId],
    pad_id: TokenId,
    cfg: &ModelConfig,
    strategy: ScanStrategy,
) -> Result<Tensor> {
    if wrapped_tokens.len() < 2 {
        return Err(Error::Contract(
            "sequence_loss needs at least two tokens".into(),
        ));
    }
    let enc = encoder_forward(ctx, mel, cfg, strategy)?;
    let inputs = &wrapped_tokens[..wrapped_tokens.len() - 1];
    let targets: Vec<i64> = wrapped_tokens[1..].iter().map(|&t| t as i64).collect();
    let logits = decoder_forward(ctx, inputs, &enc, cfg, strategy)?;
    logits.softmax_cross_entropy(&targets, pad_id as i64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use rand::Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            d_state: 4,
            d_inner: 16,
            conv_kernel: 4,
            vocab_size: 32,
            max_text_len: 16,
            n_mels: 8,
        }
    }

    fn random_mel(rng: &mut impl Rng, frames: usize, n_mels: usize) -> Vec<f64> {
        (0..frames * n_mels).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Blocks are identity at init (zero output projections); give them
    /// teeth for perturbation tests.
    pub(super) fn randomize_out_projections(store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..store.len() {
            let p = store.by_index_mut(i);
            if p.name.ends_with("out.w") {
                let fan_in = p.shape[0];
                p.data = linear_init(&mut rng, fan_in, p.data.len());
            }
        }
    }

    #[test]
    fn param_count_matches_registry() {
        for cfg in [tiny_cfg(), ModelConfig::default()] {
            let store = init_params(&cfg, 0).unwrap();
            assert_eq!(store.total_len(), cfg.param_count());
        }
    }

    #[test]
    fn stem_halves_frame_count() {
        let cfg = tiny_cfg();
        let store = init_params(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for frames in [998usize, 20, 7, 1] {
            let tape = Tape::new();
            let ctx = ParamCtx::new(tape.clone(), &store, false);
            let mel = tape
                .leaf(&[frames, cfg.n_mels], random_mel(&mut rng, frames, cfg.n_mels), false)
                .unwrap();
            let enc = encoder_forward(&ctx, &mel, &cfg, ScanStrategy::Sequential).unwrap();
            assert_eq!(enc.shape(), vec![frames.div_ceil(2), cfg.d_model]);
        }
    }

    #[test]
    fn decoder_shapes_and_errors() {
        let cfg = tiny_cfg();
        let store = init_params(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tape = Tape::new();
        let ctx = ParamCtx::new(tape.clone(), &store, false);
        let mel = tape
            .leaf(&[20, cfg.n_mels], random_mel(&mut rng, 20, cfg.n_mels), false)
            .unwrap();
        let enc = encoder_forward(&ctx, &mel, &cfg, ScanStrategy::Sequential).unwrap();
        let logits =
            decoder_forward(&ctx, &[1, 2, 3], &enc, &cfg, ScanStrategy::Sequential).unwrap();
        assert_eq!(logits.shape(), vec![3, cfg.vocab_size]);

        let too_long: Vec<u32> = (0..cfg.max_text_len as u32 + 1).map(|i| i % 4).collect();
        assert!(matches!(
            decoder_forward(&ctx, &too_long, &enc, &cfg, ScanStrategy::Sequential),
            Err(Error::Length { .. })
        ));
        assert!(matches!(
            decoder_forward(&ctx, &[99], &enc, &cfg, ScanStrategy::Sequential),
            Err(Error::Vocab(_))
        ));
    }

    #[test]
    fn cross_connection_is_identity_at_init() {
        let cfg = tiny_cfg();
        let store = init_params(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tape = Tape::new();
        let ctx = ParamCtx::new(tape.clone(), &store, false);
        let enc = tape
            .leaf(&[5, cfg.d_model], random_mel(&mut rng, 5, cfg.d_model), false)
            .unwrap();
        let dec = tape
            .leaf(&[3, cfg.d_model], random_mel(&mut rng, 3, cfg.d_model), false)
            .unwrap();
        let out = cross_connection(&ctx, "dec.block0.cross", &dec, &enc, &cfg, ScanStrategy::Sequential)
            .unwrap();
        assert_eq!(out.to_vec(), dec.to_vec());
    }

    #[test]
    fn decoder_causality_is_structural() {
        let cfg = tiny_cfg();
        let mut store = init_params(&cfg, 7).unwrap();
        randomize_out_projections(&mut store, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mel = random_mel(&mut rng, 20, cfg.n_mels);

        let logits_for = |tokens: &[u32]| -> Vec<f64> {
            let tape = Tape::new();
            let ctx = ParamCtx::new(tape.clone(), &store, false);
            let mel_t = tape.leaf(&[20, cfg.n_mels], mel.clone(), false).unwrap();
            let enc = encoder_forward(&ctx, &mel_t, &cfg, ScanStrategy::Sequential).unwrap();
            decoder_forward(&ctx, tokens, &enc, &cfg, ScanStrategy::Sequential)
                .unwrap()
                .to_vec()
        };

        let base_tokens: Vec<u32> = vec![1, 5, 9, 13, 2, 6];
        let base = logits_for(&base_tokens);
        for t in 1..base_tokens.len() {
            let mut pert = base_tokens.clone();
            pert[t] = (pert[t] + 3) % cfg.vocab_size as u32;
            let out = logits_for(&pert);
            for pos in 0..t {
                for v in 0..cfg.vocab_size {
                    let diff = (base[pos * cfg.vocab_size + v] - out[pos * cfg.vocab_size + v]).abs();
                    assert!(diff < 1e-9, "pos {pos} leaked from perturbation at {t}: {diff}");
                }
            }
        }
    }

    #[test]
    fn encoder_conditioning_is_live() {
        let cfg = tiny_cfg();
        let mut store = init_params(&cfg, 10).unwrap();
        randomize_out_projections(&mut store, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mel_a = random_mel(&mut rng, 20, cfg.n_mels);
        let mut mel_b = mel_a.clone();
        mel_b[3] += 0.5;

        let logits_for = |mel: &Vec<f64>| -> Vec<f64> {
            let tape = Tape::new();
            let ctx = ParamCtx::new(tape.clone(), &store, false);
            let mel_t = tape.leaf(&[20, cfg.n_mels], mel.clone(), false).unwrap();
            let enc = encoder_forward(&ctx, &mel_t, &cfg, ScanStrategy::Sequential).unwrap();
            decoder_forward(&ctx, &[1, 2, 3], &enc, &cfg, ScanStrategy::Sequential)
                .unwrap()
                .to_vec()
        };
        let a = logits_for(&mel_a);
        let b = logits_for(&mel_b);
        let max_diff = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-8, "decoder ignores the encoder ({max_diff})");
    }

    #[test]
    fn encoder_stem_influence_offset() {
        // Perturbing mel frame t may move encoder features no earlier than
        // floor((t - pad) / 2) with pad = 1.
        let cfg = tiny_cfg();
        let mut store = init_params(&cfg, 13).unwrap();
        randomize_out_projections(&mut store, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let frames = 24;
        let mel_a = random_mel(&mut rng, frames, cfg.n_mels);

        let enc_for = |mel: &Vec<f64>| -> Vec<f64> {
            let tape = Tape::new();
            let ctx = ParamCtx::new(tape.clone(), &store, false);
            let mel_t = tape.leaf(&[frames, cfg.n_mels], mel.clone(), false).unwrap();
            encoder_forward(&ctx, &mel_t, &cfg, ScanStrategy::Sequential)
                .unwrap()
                .to_vec()
        };
        let base = enc_for(&mel_a);
        for t in [5usize, 10, 17] {
            let mut pert = mel_a.clone();
            pert[t * cfg.n_mels] += 1.0;
            let out = enc_for(&pert);
            let first_allowed = (t - 1) / 2;
            for pos in 0..first_allowed {
                for c in 0..cfg.d_model {
                    assert_eq!(
                        base[pos * cfg.d_model + c],
                        out[pos * cfg.d_model + c],
                        "frame {t} leaked to encoder position {pos}"
                    );
                }
            }
        }
    }

    #[test]
    fn full_tiny_model_gradient_check() {
        use crate::numerics::grad_check;
        let cfg = tiny_cfg();
        let mut store = init_params(&cfg, 16).unwrap();
        randomize_out_projections(&mut store, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mel = random_mel(&mut rng, 20, cfg.n_mels);
        let tokens: Vec<u32> = vec![3, 7, 1, 4, 2, 9];
        let pad = 31u32;

        // Gradient with respect to a few representative parameters, one at
        // a time through the whole model.
        for target in ["enc.block0.proj_b.w", "dec.block1.cross.in_u.w", "dec.embed"] {
            let idx = store.index_of(target).unwrap();
            let shape = store.by_index(idx).shape.clone();
            let data = store.by_index(idx).data.clone();
            let err = grad_check(
                |probe| {
                    let tape = probe.tape();
                    let ctx = ParamCtx::new(tape.clone(), &store, false);
                    ctx.bind_override(target, probe.clone())?;
                    let mel_t = tape.leaf(&[20, cfg.n_mels], mel.clone(), false)?;
                    sequence_loss(&ctx, &mel_t, &tokens, pad, &cfg, ScanStrategy::Sequential)
                },
                &shape,
                &data,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{target} grad err {err}");
        }
    }
}
