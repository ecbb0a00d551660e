#ifndef TVLT_H
#define TVLT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum {
  TVLT_STATUS_OK = 0,
  TVLT_STATUS_NULL_ARGUMENT = 1,
  TVLT_STATUS_INVALID_ARGUMENT = 2,
  TVLT_STATUS_CONFIG = 3,
  TVLT_STATUS_IO = 4,
  TVLT_STATUS_SHAPE = 5,
  TVLT_STATUS_NUMERIC = 6,
  TVLT_STATUS_FORMAT = 7,
  TVLT_STATUS_INTEGRITY = 8,
  TVLT_STATUS_VERSION = 9,
  TVLT_STATUS_BUFFER_TOO_SMALL = 10,
  TVLT_STATUS_PANIC = 11,
} TvltStatus;

// Model size presets.
typedef enum {
  TVLT_PRESET_DESK = 0,
  TVLT_PRESET_PAPER = 1,
  TVLT_PRESET_PAPER_PATCH_COUNT = 2,
} TvltPreset;

// A model: configuration plus weights.
typedef struct TvltModel TvltModel;

// A log-mel spectrogram, frames by mel bands.
typedef struct TvltSpectrogram TvltSpectrogram;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *tvlt_version(void);

// Message of the last failed call on this thread, empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *tvlt_last_error(void);

// Trainable parameter counts of a preset, computed without allocating
// weights: embeddings plus encoder, and the full pretraining model.
//
// # Safety
// Output pointers must be null or valid for writes.
TvltStatus tvlt_preset_param_count(TvltPreset preset, size_t *encoder_out, size_t *total_out);

// Computes a log-mel spectrogram of mono samples in [-1, 1] with a
// 2048-point FFT, hop 512 and 128 mel bands.
//
// # Safety
// `samples` must hold `n_samples` values; `out` must be valid for writes.
TvltStatus tvlt_spectrogram_compute(const double *samples,
                                    size_t n_samples,
                                    uint32_t sample_rate,
                                    TvltSpectrogram **out);

// # Safety
// `spec` must be a live handle; output pointers valid for writes.
TvltStatus tvlt_spectrogram_shape(const TvltSpectrogram *spec, size_t *frames, size_t *mels);

// Copies the values, frame-major, into `buf` of exactly `frames × mels`.
//
// # Safety
// `spec` must be a live handle; `buf` must hold `len` values.
TvltStatus tvlt_spectrogram_copy(const TvltSpectrogram *spec, double *buf, size_t len);

// # Safety
// `spec` must be null or a handle not yet freed.
void tvlt_spectrogram_free(TvltSpectrogram *spec);

// A freshly initialized model for `preset`.
//
// # Safety
// `out` must be valid for writes.
TvltStatus tvlt_model_new(TvltPreset preset, uint64_t seed, TvltModel **out);

// Loads a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` valid for writes.
TvltStatus tvlt_model_load(const char *path, TvltModel **out);

// # Safety
// `model` must be a live handle; `path` a NUL-terminated string.
TvltStatus tvlt_model_save(const TvltModel *model, const char *path);

// # Safety
// `model` must be null or a handle not yet freed.
void tvlt_model_free(TvltModel *model);

// Scalars held by the model's weights.
//
// # Safety
// `model` must be a live handle; `out` valid for writes.
TvltStatus tvlt_model_param_count(const TvltModel *model, size_t *out);

// Model configuration as JSON. `needed` receives the size including the NUL
// even when `cap` is too small.
//
// # Safety
// `buf` must hold `cap` bytes; `needed` must be valid for writes.
TvltStatus tvlt_model_config_json(const TvltModel *model, char *buf, size_t cap, size_t *needed);

// Encoder width: the length of the CLS vector from [`tvlt_model_encode`].
//
// # Safety
// `model` must be a live handle; `out` valid for writes.
TvltStatus tvlt_model_embed_dim(const TvltModel *model, size_t *out);

// Expected frame geometry: frames × side × side × channels, row-major.
//
// # Safety
// `model` must be a live handle; output pointers valid for writes.
TvltStatus tvlt_model_frame_shape(const TvltModel *model,
                                  size_t *frames,
                                  size_t *side,
                                  size_t *channels);

// Vision and audio token counts for a clip of the expected geometry and a
// spectrogram with `spectrogram_frames` frames.
//
// # Safety
// `model` must be a live handle; output pointers valid for writes.
TvltStatus tvlt_model_token_counts(const TvltModel *model,
                                   size_t spectrogram_frames,
                                   size_t *vision,
                                   size_t *audio);

// CLS embedding of frames plus spectrogram into `cls_out` (`cls_len` must
// equal the embed dim).
//
// # Safety
// `pixels` must hold `n_values` floats; `cls_out` must hold `cls_len`.
TvltStatus tvlt_model_encode(const TvltModel *model,
                             const float *pixels,
                             size_t n_values,
                             const TvltSpectrogram *spec,
                             float *cls_out,
                             size_t cls_len);

// Audio-visual matching logit (positive means "these belong together").
//
// # Safety
// `pixels` must hold `n_values` floats; `logit_out` valid for writes.
TvltStatus tvlt_model_match_logit(const TvltModel *model,
                                  const float *pixels,
                                  size_t n_values,
                                  const TvltSpectrogram *spec,
                                  float *logit_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TVLT_H */
