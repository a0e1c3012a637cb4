//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic "SMBA", version u32
//! vocab_hash u64, step u64
//! model config: 9 x u32
//! train config: 6 x f64, 2 x u32, 2 x u64
//! n_params u32
//! per param: name_len u16, name bytes, rank u8, dims u32 x rank,
//!            values f32 x numel
//! optimizer flag u8; when 1: opt_step u64, then per param m and v
//!            as f32 x numel each
//! ```
//!
//! Values are stored in f32; a load/save round trip perturbs forward
//! outputs only at the f32 rounding level.

use std::fs;
use std::path::Path;

use crate::audio::FrontendConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::training::{AdamW, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SMBA";
pub const CHECKPOINT_VERSION: u32 = 1;

pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub frontend: FrontendConfig,
    pub store: ParamStore,
    pub optimizer: Option<AdamW>,
    pub step: u64,
    pub vocab_hash: u64,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, values: &[f64]) {
        for &v in values {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "unexpected end of file at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    frontend: &FrontendConfig,
    optimizer: Option<&AdamW>,
    step: u64,
    vocab_hash: u64,
) -> Result<()> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u64(vocab_hash);
    w.u64(step);

    for v in [
        model_cfg.d_model,
        model_cfg.n_encoder_layers,
        model_cfg.n_decoder_layers,
        model_cfg.d_state,
        model_cfg.d_inner,
        model_cfg.conv_kernel,
        model_cfg.vocab_size,
        model_cfg.max_text_len,
        model_cfg.n_mels,
    ] {
        w.u32(v as u32);
    }
    w.f64(train_cfg.lr0);
    w.f64(train_cfg.weight_decay);
    w.f64(train_cfg.adam_eps);
    w.f64(train_cfg.beta1);
    w.f64(train_cfg.beta2);
    w.f64(train_cfg.clip_norm);
    w.u32(train_cfg.batch_size as u32);
    w.u32(train_cfg.epochs as u32);
    w.u64(train_cfg.seed);
    w.u64(train_cfg.total_steps as u64);

    for v in [
        frontend.sample_rate as usize,
        frontend.win_samples,
        frontend.hop_samples,
        frontend.n_fft,
        frontend.n_mels,
        frontend.target_samples,
    ] {
        w.u32(v as u32);
    }
    w.f64(frontend.log_floor);

    w.u32(store.len() as u32);
    for p in store.iter() {
        let name = p.name.as_bytes();
        w.u16(name.len() as u16);
        w.buf.extend_from_slice(name);
        w.u8(p.shape.len() as u8);
        for &d in &p.shape {
            w.u32(d as u32);
        }
        w.f32s(&p.data);
    }

    match optimizer {
        Some(opt) => {
            w.u8(1);
            let (m, v, opt_step) = opt.parts();
            w.u64(opt_step);
            for (mi, vi) in m.iter().zip(v) {
                w.f32s(mi);
                w.f32s(vi);
            }
        }
        None => w.u8(0),
    }

    fs::write(path, &w.buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let vocab_hash = r.u64()?;
    let step = r.u64()?;

    let mut dims = [0usize; 9];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let model_cfg = ModelConfig {
        d_model: dims[0],
        n_encoder_layers: dims[1],
        n_decoder_layers: dims[2],
        d_state: dims[3],
        d_inner: dims[4],
        conv_kernel: dims[5],
        vocab_size: dims[6],
        max_text_len: dims[7],
        n_mels: dims[8],
    };
    let train_cfg = TrainConfig {
        lr0: r.f64()?,
        weight_decay: r.f64()?,
        adam_eps: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        clip_norm: r.f64()?,
        batch_size: r.u32()? as usize,
        epochs: r.u32()? as usize,
        seed: r.u64()?,
        total_steps: r.u64()? as usize,
    };

    let mut fe = [0usize; 6];
    for v in fe.iter_mut() {
        *v = r.u32()? as usize;
    }
    let frontend = FrontendConfig {
        sample_rate: fe[0] as u32,
        win_samples: fe[1],
        hop_samples: fe[2],
        n_fft: fe[3],
        n_mels: fe[4],
        target_samples: fe[5],
        log_floor: r.f64()?,
    };

    let n_params = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n_params {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f32s(numel)?;
        store.register(&name, &shape, data);
    }

    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let opt_step = r.u64()?;
            let mut m = Vec::with_capacity(store.len());
            let mut v = Vec::with_capacity(store.len());
            for i in 0..store.len() {
                let numel = store.by_index(i).data.len();
                m.push(r.f32s(numel)?);
                v.push(r.f32s(numel)?);
            }
            Some(AdamW::from_parts(m, v, opt_step))
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "bad optimizer flag {other}"
            )))
        }
    };

    Ok(Checkpoint {
        model_cfg,
        train_cfg,
        frontend,
        store,
        optimizer,
        step,
        vocab_hash,
    })
}
