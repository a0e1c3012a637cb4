#ifndef SAMBA_ASR_H
#define SAMBA_ASR_H

/* Generated by cbindgen from the samba-asr-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes for every FFI entry point.
 */
typedef enum SambaStatus {
  SAMBA_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  SAMBA_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  SAMBA_STATUS_INVALID_UTF8 = 2,
  /**
   * File could not be read or written.
   */
  SAMBA_STATUS_IO = 3,
  /**
   * File contents were malformed (checkpoint, vocab, or WAV).
   */
  SAMBA_STATUS_BAD_FORMAT = 4,
  /**
   * The checkpoint and vocab file do not belong together.
   */
  SAMBA_STATUS_VOCAB_MISMATCH = 5,
  /**
   * Inference failed.
   */
  SAMBA_STATUS_INFERENCE = 6,
} SambaStatus;

/**
 * Opaque recognition engine: model parameters, frontend configuration,
 * and the vocabulary.
 */
typedef struct SambaEngine SambaEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads an engine from a checkpoint and its vocab file.
 *
 * On success writes a handle into `out_engine`; release it with
 * [`samba_engine_free`].
 *
 * # Safety
 * `ckpt_path` and `vocab_path` must be valid NUL-terminated strings and
 * `out_engine` must point to writable memory.
 */
enum SambaStatus samba_engine_load(const char *ckpt_path,
                                   const char *vocab_path,
                                   struct SambaEngine **out_engine);

/**
 * Releases an engine returned by [`samba_engine_load`]. Null is a no-op.
 *
 * # Safety
 * `engine` must be a handle from [`samba_engine_load`] that has not
 * already been freed.
 */
void samba_engine_free(struct SambaEngine *engine);

/**
 * Transcribes a WAV file. On success writes a heap-allocated UTF-8
 * string into `out_text`; release it with [`samba_string_free`].
 *
 * # Safety
 * `engine` must be a live handle, `wav_path` a valid NUL-terminated
 * string, and `out_text` writable.
 */
enum SambaStatus samba_engine_transcribe_file(const struct SambaEngine *engine,
                                              const char *wav_path,
                                              char **out_text);

/**
 * Frees a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must come from this library and not have been freed before.
 */
void samba_string_free(char *s);

/**
 * Word error rate between a reference and a hypothesis transcript
 * (case-folded, punctuation stripped, pooled word-level edit distance
 * over the reference length). Writes the rate into `out_wer`.
 *
 * # Safety
 * Both strings must be valid NUL-terminated UTF-8 and `out_wer`
 * writable.
 */
enum SambaStatus samba_wer(const char *reference, const char *hypothesis, double *out_wer);

/**
 * Library version as a static NUL-terminated string.
 */
const char *samba_version(void);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SAMBA_ASR_H */
