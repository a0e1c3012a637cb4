//! C ABI over the speech recognition engine.
//!
//! The engine is an opaque handle created from a checkpoint and a vocab
//! file. All functions return a [`SambaStatus`]; outputs go through out
//! pointers. Strings returned by the library must be released with
//! [`samba_string_free`].

use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use samba_asr::audio::{features_for_file, FrontendConfig};
use samba_asr::error::Error;
use samba_asr::eval::wer;
use samba_asr::model::{greedy_decode, ModelConfig};
use samba_asr::params::ParamStore;
use samba_asr::tokenizer::Vocab;
use samba_asr::training::load_checkpoint;

/// Result codes for every FFI entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SambaStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// File could not be read or written.
    Io = 3,
    /// File contents were malformed (checkpoint, vocab, or WAV).
    BadFormat = 4,
    /// The checkpoint and vocab file do not belong together.
    VocabMismatch = 5,
    /// Inference failed.
    Inference = 6,
}

/// Opaque recognition engine: model parameters, frontend configuration,
/// and the vocabulary.
pub struct SambaEngine {
    store: ParamStore,
    model_cfg: ModelConfig,
    frontend: FrontendConfig,
    vocab: Vocab,
}

fn status_of(err: &Error) -> SambaStatus {
    match err {
        Error::Io { .. } => SambaStatus::Io,
        Error::Vocab(_) => SambaStatus::VocabMismatch,
        Error::Checkpoint(_)
        | Error::MalformedWav(_)
        | Error::UnsupportedCodec(_)
        | Error::TruncatedWav(_)
        | Error::Config(_) => SambaStatus::BadFormat,
        _ => SambaStatus::Inference,
    }
}

unsafe fn path_arg<'a>(ptr: *const c_char) -> Result<&'a Path, SambaStatus> {
    if ptr.is_null() {
        return Err(SambaStatus::NullArgument);
    }
    let s = unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| SambaStatus::InvalidUtf8)?;
    Ok(Path::new(s))
}

/// Loads an engine from a checkpoint and its vocab file.
///
/// On success writes a handle into `out_engine`; release it with
/// [`samba_engine_free`].
///
/// # Safety
/// `ckpt_path` and `vocab_path` must be valid NUL-terminated strings and
/// `out_engine` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn samba_engine_load(
    ckpt_path: *const c_char,
    vocab_path: *const c_char,
    out_engine: *mut *mut SambaEngine,
) -> SambaStatus {
    if out_engine.is_null() {
        return SambaStatus::NullArgument;
    }
    unsafe { *out_engine = ptr::null_mut() };
    let ckpt_path = match unsafe { path_arg(ckpt_path) } {
        Ok(p) => p,
        Err(s) => return s,
    };
    let vocab_path = match unsafe { path_arg(vocab_path) } {
        Ok(p) => p,
        Err(s) => return s,
    };
    let checkpoint = match load_checkpoint(ckpt_path) {
        Ok(c) => c,
        Err(e) => return status_of(&e),
    };
    let vocab = match Vocab::load(vocab_path) {
        Ok(v) => v,
        Err(e) => return status_of(&e),
    };
    if vocab.hash() != checkpoint.vocab_hash {
        return SambaStatus::VocabMismatch;
    }
    let engine = Box::new(SambaEngine {
        store: checkpoint.store,
        model_cfg: checkpoint.model_cfg,
        frontend: checkpoint.frontend,
        vocab,
    });
    unsafe { *out_engine = Box::into_raw(engine) };
    SambaStatus::Ok
}

/// Releases an engine returned by [`samba_engine_load`]. Null is a no-op.
///
/// # Safety
/// `engine` must be a handle from [`samba_engine_load`] that has not
/// already been freed.
#[no_mangle]
pub unsafe extern "C" fn samba_engine_free(engine: *mut SambaEngine) {
    if !engine.is_null() {
        drop(unsafe { Box::from_raw(engine) });
    }
}

/// Transcribes a WAV file. On success writes a heap-allocated UTF-8
/// string into `out_text`; release it with [`samba_string_free`].
///
/// # Safety
/// `engine` must be a live handle, `wav_path` a valid NUL-terminated
/// string, and `out_text` writable.
#[no_mangle]
pub unsafe extern "C" fn samba_engine_transcribe_file(
    engine: *const SambaEngine,
    wav_path: *const c_char,
    out_text: *mut *mut c_char,
) -> SambaStatus {
    if engine.is_null() || out_text.is_null() {
        return SambaStatus::NullArgument;
    }
    unsafe { *out_text = ptr::null_mut() };
    let wav_path = match unsafe { path_arg(wav_path) } {
        Ok(p) => p,
        Err(s) => return s,
    };
    let engine = unsafe { &*engine };
    let mel = match features_for_file(wav_path, &engine.frontend) {
        Ok(m) => m,
        Err(e) => return status_of(&e),
    };
    let ids = match greedy_decode(
        &engine.store,
        &engine.model_cfg,
        &engine.vocab,
        &mel,
        engine.model_cfg.max_text_len,
    ) {
        Ok(ids) => ids,
        Err(e) => return status_of(&e),
    };
    let text = match engine.vocab.decode_string(&ids) {
        Ok(t) => t,
        Err(e) => return status_of(&e),
    };
    match CString::new(text) {
        Ok(c) => {
            unsafe { *out_text = c.into_raw() };
            SambaStatus::Ok
        }
        Err(_) => SambaStatus::Inference,
    }
}

/// Frees a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must come from this library and not have been freed before.
#[no_mangle]
pub unsafe extern "C" fn samba_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Word error rate between a reference and a hypothesis transcript
/// (case-folded, punctuation stripped, pooled word-level edit distance
/// over the reference length). Writes the rate into `out_wer`.
///
/// # Safety
/// Both strings must be valid NUL-terminated UTF-8 and `out_wer`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn samba_wer(
    reference: *const c_char,
    hypothesis: *const c_char,
    out_wer: *mut f64,
) -> SambaStatus {
    if reference.is_null() || hypothesis.is_null() || out_wer.is_null() {
        return SambaStatus::NullArgument;
    }
    let r = match unsafe { CStr::from_ptr(reference) }.to_str() {
        Ok(s) => s,
        Err(_) => return SambaStatus::InvalidUtf8,
    };
    let h = match unsafe { CStr::from_ptr(hypothesis) }.to_str() {
        Ok(s) => s,
        Err(_) => return SambaStatus::InvalidUtf8,
    };
    unsafe { *out_wer = wer(r, h) };
    SambaStatus::Ok
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn samba_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

#[cfg(test)]
mod tests {
    use super::*;
    use samba_asr::model::init_params;
    use samba_asr::training::{save_checkpoint, TrainConfig};
    use std::ffi::CString;

    fn temp_dir(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("samba_ffi_tests").join(name);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn build_fixture(dir: &Path) -> (CString, CString, CString) {
        let vocab = Vocab::from_merges(vec![]).unwrap();
        let model_cfg = ModelConfig {
            d_model: 8,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            d_state: 4,
            d_inner: 16,
            conv_kernel: 4,
            vocab_size: vocab.size(),
            max_text_len: 8,
            n_mels: 80,
        };
        let frontend = FrontendConfig {
            target_samples: 4000,
            ..FrontendConfig::default()
        };
        let store = init_params(&model_cfg, 0).unwrap();
        let ckpt = dir.join("model.ckpt");
        save_checkpoint(
            &ckpt,
            &store,
            &model_cfg,
            &TrainConfig::default(),
            &frontend,
            None,
            0,
            vocab.hash(),
        )
        .unwrap();
        let vocab_path = dir.join("vocab.txt");
        vocab.save(&vocab_path).unwrap();

        let samples: Vec<f64> = (0..4000)
            .map(|i| (2.0 * std::f64::consts::PI * 550.0 * i as f64 / 16000.0).sin() * 0.4)
            .collect();
        let wav = dir.join("tone.wav");
        samba_asr::audio::write_wav_pcm16(&wav, &samples, 16000).unwrap();

        (
            CString::new(ckpt.to_str().unwrap()).unwrap(),
            CString::new(vocab_path.to_str().unwrap()).unwrap(),
            CString::new(wav.to_str().unwrap()).unwrap(),
        )
    }

    #[test]
    fn load_transcribe_free_lifecycle() {
        let dir = temp_dir("lifecycle");
        let (ckpt, vocab, wav) = build_fixture(&dir);
        let mut engine: *mut SambaEngine = ptr::null_mut();
        let status = unsafe { samba_engine_load(ckpt.as_ptr(), vocab.as_ptr(), &mut engine) };
        assert_eq!(status, SambaStatus::Ok);
        assert!(!engine.is_null());

        let mut text: *mut c_char = ptr::null_mut();
        let status = unsafe { samba_engine_transcribe_file(engine, wav.as_ptr(), &mut text) };
        assert_eq!(status, SambaStatus::Ok);
        assert!(!text.is_null());
        let s = unsafe { CStr::from_ptr(text) }.to_str().unwrap().to_owned();
        assert!(s.len() < 100);
        unsafe { samba_string_free(text) };
        unsafe { samba_engine_free(engine) };
    }

    #[test]
    fn null_and_missing_inputs_report_status() {
        let mut engine: *mut SambaEngine = ptr::null_mut();
        let status =
            unsafe { samba_engine_load(ptr::null(), ptr::null(), &mut engine) };
        assert_eq!(status, SambaStatus::NullArgument);

        let dir = temp_dir("missing");
        let bogus = CString::new(dir.join("nope.ckpt").to_str().unwrap()).unwrap();
        let status = unsafe { samba_engine_load(bogus.as_ptr(), bogus.as_ptr(), &mut engine) };
        assert_eq!(status, SambaStatus::Io);
        assert!(engine.is_null());
    }

    #[test]
    fn mismatched_vocab_is_rejected() {
        let dir = temp_dir("mismatch");
        let (ckpt, _vocab, _wav) = build_fixture(&dir);
        let other = Vocab::from_merges(vec![(97, 98)]).unwrap();
        let other_path = dir.join("other_vocab.txt");
        other.save(&other_path).unwrap();
        let other_c = CString::new(other_path.to_str().unwrap()).unwrap();
        let mut engine: *mut SambaEngine = ptr::null_mut();
        let status = unsafe { samba_engine_load(ckpt.as_ptr(), other_c.as_ptr(), &mut engine) };
        assert_eq!(status, SambaStatus::VocabMismatch);
    }

    #[test]
    fn wer_through_the_abi() {
        let r = CString::new("a b c").unwrap();
        let h = CString::new("a x c").unwrap();
        let mut out = 0.0f64;
        let status = unsafe { samba_wer(r.as_ptr(), h.as_ptr(), &mut out) };
        assert_eq!(status, SambaStatus::Ok);
        assert!((out - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn version_is_a_c_string() {
        let v = unsafe { CStr::from_ptr(samba_version()) };
        assert!(!v.to_str().unwrap().is_empty());
    }
}
