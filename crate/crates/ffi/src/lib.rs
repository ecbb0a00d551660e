//! C interface to the tvlt library.
//!
//! Every function returns a [`TvltStatus`]; on failure the message is kept
//! per thread and read with [`tvlt_last_error`]. Objects cross the boundary as
//! opaque handles that the caller releases with the matching `_free`. Panics
//! are caught at the boundary and reported as [`TvltStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use tvlt::audio::{log_mel_spectrogram, Spectrogram, SpectrogramConfig, Waveform};
use tvlt::model::{
    count_params, encode, init_params, load_checkpoint, save_checkpoint, vam_logit, Checkpoint, ModelConfig, Preset,
};
use tvlt::numerics::Graph;
use tvlt::tokenizer::{patchify_frames, patchify_spectrogram, VideoClip};
use tvlt::Error;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TvltStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Shape = 5,
    Numeric = 6,
    Format = 7,
    Integrity = 8,
    Version = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// Model size presets.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TvltPreset {
    Desk = 0,
    Paper = 1,
    PaperPatchCount = 2,
}

impl From<TvltPreset> for Preset {
    fn from(p: TvltPreset) -> Self {
        match p {
            TvltPreset::Desk => Preset::Desk,
            TvltPreset::Paper => Preset::Paper,
            TvltPreset::PaperPatchCount => Preset::PaperPatchCount,
        }
    }
}

/// A model: configuration plus weights.
pub struct TvltModel {
    ckpt: Checkpoint,
}

/// A log-mel spectrogram, frames by mel bands.
pub struct TvltSpectrogram {
    spec: Spectrogram,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure {
    status: TvltStatus,
    message: String,
}

impl Failure {
    fn new(status: TvltStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) | Error::BatchSize(_) => TvltStatus::Config,
            Error::Io(_) | Error::NonEmptyDir(_) | Error::Image(_) => TvltStatus::Io,
            Error::Dimension { .. } | Error::Shape(_) | Error::EmptyAxis { .. } | Error::Capacity(_) => {
                TvltStatus::Shape
            }
            Error::Numeric(_) | Error::NanGradient { .. } | Error::NanLoss { .. } => TvltStatus::Numeric,
            Error::Format(_) | Error::Json(_) => TvltStatus::Format,
            Error::Integrity(_) => TvltStatus::Integrity,
            Error::Version { .. } => TvltStatus::Version,
            Error::Contract(_) => TvltStatus::InvalidArgument,
        };
        Failure::new(status, e.to_string())
    }
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Runs `f`, records any failure and converts it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TvltStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            TvltStatus::Ok
        }
        Ok(Err(fail)) => {
            set_last_error(&fail.message);
            fail.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            TvltStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: the caller promises `p` is null or valid for reads.
    unsafe { p.as_ref() }.ok_or_else(|| Failure::new(TvltStatus::NullArgument, format!("`{what}` is null")))
}

fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: the caller promises `p` is null or valid for writes.
    unsafe { p.as_mut() }.ok_or_else(|| Failure::new(TvltStatus::NullArgument, format!("`{what}` is null")))
}

fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::new(TvltStatus::NullArgument, format!("`{what}` is null")));
    }
    // SAFETY: non-null and the caller promises `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::new(TvltStatus::NullArgument, format!("`{what}` is null")));
    }
    // SAFETY: non-null and the caller promises `len` writable elements.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    let s = non_null(p, "path")?;
    // SAFETY: non-null and the caller promises a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(s) };
    s.to_str()
        .map(PathBuf::from)
        .map_err(|_| Failure::new(TvltStatus::InvalidArgument, "path is not UTF-8"))
}

/// Copies `text` plus a NUL into `buf` when it fits; `needed` always receives
/// the required size in bytes.
fn write_text(text: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> Result<(), Failure> {
    let bytes = text.as_bytes();
    *out_ptr(needed, "needed")? = bytes.len() + 1;
    if cap < bytes.len() + 1 {
        return Err(Failure::new(
            TvltStatus::BufferTooSmall,
            format!("need {} bytes, buffer has {cap}", bytes.len() + 1),
        ));
    }
    let dst = slice_mut(buf.cast::<u8>(), cap, "buf")?;
    dst[..bytes.len()].copy_from_slice(bytes);
    dst[bytes.len()] = 0;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tvlt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn tvlt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Trainable parameter counts of a preset, computed without allocating
/// weights: embeddings plus encoder, and the full pretraining model.
///
/// # Safety
/// Output pointers must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tvlt_preset_param_count(
    preset: TvltPreset,
    encoder_out: *mut usize,
    total_out: *mut usize,
) -> TvltStatus {
    guard(|| {
        let counts = count_params(&Preset::from(preset).model());
        *out_ptr(encoder_out, "encoder_out")? = counts.encoder_only();
        *out_ptr(total_out, "total_out")? = counts.total;
        Ok(())
    })
}

/// Computes a log-mel spectrogram of mono samples in [-1, 1] with a
/// 2048-point FFT, hop 512 and 128 mel bands.
///
/// # Safety
/// `samples` must hold `n_samples` values; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tvlt_spectrogram_compute(
    samples: *const f64,
    n_samples: usize,
    sample_rate: u32,
    out: *mut *mut TvltSpectrogram,
) -> TvltStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = std::ptr::null_mut();
        let wave = Waveform::new(slice(samples, n_samples, "samples")?.to_vec(), sample_rate)?;
        let cfg = SpectrogramConfig {
            sample_rate,
            ..SpectrogramConfig::default()
        };
        let spec = log_mel_spectrogram(&wave, &cfg)?;
        *out = Box::into_raw(Box::new(TvltSpectrogram { spec }));
        Ok(())
    })
}

/// # Safety
/// `spec` must be a live handle; output pointers valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tvlt_spectrogram_shape(
    spec: *const TvltSpectrogram,
    frames: *mut usize,
    mels: *mut usize,
) -> TvltStatus {
    guard(|| {
        let s = &non_null(spec, "spec")?.spec;
        *out_ptr(frames, "frames")? = s.n_frames;
        *out_ptr(mels, "mels")? = s.n_mels;
        Ok(())
    })
}

/// Copies the values, frame-major, into `buf` of exactly `frames × mels`.
///
/// # Safety
/// `spec` must be a live handle; `buf` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn tvlt_spectrogram_copy(spec: *const TvltSpectrogram, buf: *mut f64, len: usize) -> TvltStatus {
    guard(|| {
        let s = &non_null(spec, "spec")?.spec;
        if len != s.values.len() {
            return Err(Failure::new(
                TvltStatus::BufferTooSmall,
                format!("buffer holds {len} values, spectrogram has {}", s.values.len()),
            ));
        }
        slice_mut(buf, len, "buf")?.copy_from_slice(&s.values);
        Ok(())
    })
}

/// # Safety
/// `spec` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tvlt_spectrogram_free(spec: *mut TvltSpectrogram) {
    if !spec.is_null() {
        // SAFETY: produced by Box::into_raw in tvlt_spectrogram_compute.
        drop(unsafe { Box::from_raw(spec) });
    }
}

/// A freshly initialized model for `preset`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tvlt_model_new(preset: TvltPreset, seed: u64, out: *mut *mut TvltModel) -> TvltStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = std::ptr::null_mut();
        let config: ModelConfig = Preset::from(preset).model();
        let params = init_params(&config, seed)?;
        let ckpt = Checkpoint {
            config,
            params,
            head: None,
            global_step: 0,
            optimizer: None,
        };
        *out = Box::into_raw(Box::new(TvltModel { ckpt }));
        Ok(())
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tvlt_model_load(path: *const c_char, out: *mut *mut TvltModel) -> TvltStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = std::ptr::null_mut();
        let ckpt = load_checkpoint(&path_arg(path)?, None)?;
        *out = Box::into_raw(Box::new(TvltModel { ckpt }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tvlt_model_save(model: *const TvltModel, path: *const c_char) -> TvltStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        save_checkpoint(&m.ckpt, &path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tvlt_model_free(model: *mut TvltModel) {
    if !model.is_null() {
        // SAFETY: produced by Box::into_raw in tvlt_model_new/load.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Scalars held by the model's weights.
///
/// # Safety
/// `model` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tvlt_model_param_count(model: *const TvltModel, out: *mut usize) -> TvltStatus {
    guard(|| {
        *out_ptr(out, "out")? = non_null(model, "model")?.ckpt.params.num_scalars();
        Ok(())
    })
}

/// Model configuration as JSON. `needed` receives the size including the NUL
/// even when `cap` is too small.
///
/// # Safety
/// `buf` must hold `cap` bytes; `needed` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tvlt_model_config_json(
    model: *const TvltModel,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> TvltStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let json = serde_json::to_string(&m.ckpt.config).map_err(Error::from)?;
        write_text(&json, buf, cap, needed)
    })
}

/// Encoder width: the length of the CLS vector from [`tvlt_model_encode`].
///
/// # Safety
/// `model` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tvlt_model_embed_dim(model: *const TvltModel, out: *mut usize) -> TvltStatus {
    guard(|| {
        *out_ptr(out, "out")? = non_null(model, "model")?.ckpt.config.d_enc;
        Ok(())
    })
}

/// Expected frame geometry: frames × side × side × channels, row-major.
///
/// # Safety
/// `model` must be a live handle; output pointers valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tvlt_model_frame_shape(
    model: *const TvltModel,
    frames: *mut usize,
    side: *mut usize,
    channels: *mut usize,
) -> TvltStatus {
    guard(|| {
        let c = &non_null(model, "model")?.ckpt.config;
        *out_ptr(frames, "frames")? = c.max_frames;
        *out_ptr(side, "side")? = c.image_size;
        *out_ptr(channels, "channels")? = c.channels;
        Ok(())
    })
}

/// Vision and audio token counts for a clip of the expected geometry and a
/// spectrogram with `spectrogram_frames` frames.
///
/// # Safety
/// `model` must be a live handle; output pointers valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tvlt_model_token_counts(
    model: *const TvltModel,
    spectrogram_frames: usize,
    vision: *mut usize,
    audio: *mut usize,
) -> TvltStatus {
    guard(|| {
        let c = &non_null(model, "model")?.ckpt.config;
        let grid = c.vision_grid();
        *out_ptr(vision, "vision")? = c.max_frames * grid * grid;
        *out_ptr(audio, "audio")? = c.audio_patch.time_steps(spectrogram_frames) * c.audio_bands();
        Ok(())
    })
}

fn clip(m: &TvltModel, pixels: *const f32, n_values: usize) -> Result<VideoClip, Failure> {
    let c = &m.ckpt.config;
    let data = slice(pixels, n_values, "pixels")?.to_vec();
    Ok(VideoClip::new(c.max_frames, c.image_size, c.image_size, c.channels, data)?)
}

/// Runs the encoder on frames and a spectrogram (both already normalized by
/// the caller) and returns the matching logit and the CLS vector.
fn forward(m: &TvltModel, pixels: *const f32, n_values: usize, spec: *const TvltSpectrogram) -> Result<(f32, Vec<f32>), Failure> {
    let cfg = &m.ckpt.config;
    let s = &non_null(spec, "spec")?.spec;
    if s.n_mels != cfg.n_mels {
        return Err(Failure::new(
            TvltStatus::Shape,
            format!("spectrogram has {} mel bands, model expects {}", s.n_mels, cfg.n_mels),
        ));
    }
    let vision = patchify_frames(&clip(m, pixels, n_values)?, cfg.vision_patch)?;
    let audio = patchify_spectrogram(s, cfg.audio_patch)?;
    if audio.coords.steps() > cfg.max_audio_steps {
        return Err(Failure::new(
            TvltStatus::Shape,
            format!("{} audio time patches exceed the model's {}", audio.coords.steps(), cfg.max_audio_steps),
        ));
    }
    let mut g = Graph::<f32>::new();
    let e = encode(&mut g, &m.ckpt.params, cfg, Some(&vision), Some(&audio))?;
    let cls = e.cls(&mut g)?;
    let logit = vam_logit(&mut g, &m.ckpt.params, cls)?;
    Ok((g.value(logit).item(), g.value(cls).data().to_vec()))
}

/// CLS embedding of frames plus spectrogram into `cls_out` (`cls_len` must
/// equal the embed dim).
///
/// # Safety
/// `pixels` must hold `n_values` floats; `cls_out` must hold `cls_len`.
#[no_mangle]
pub unsafe extern "C" fn tvlt_model_encode(
    model: *const TvltModel,
    pixels: *const f32,
    n_values: usize,
    spec: *const TvltSpectrogram,
    cls_out: *mut f32,
    cls_len: usize,
) -> TvltStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        if cls_len != m.ckpt.config.d_enc {
            return Err(Failure::new(
                TvltStatus::BufferTooSmall,
                format!("cls buffer holds {cls_len}, embed dim is {}", m.ckpt.config.d_enc),
            ));
        }
        let (_, cls) = forward(m, pixels, n_values, spec)?;
        slice_mut(cls_out, cls_len, "cls_out")?.copy_from_slice(&cls);
        Ok(())
    })
}

/// Audio-visual matching logit (positive means "these belong together").
///
/// # Safety
/// `pixels` must hold `n_values` floats; `logit_out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tvlt_model_match_logit(
    model: *const TvltModel,
    pixels: *const f32,
    n_values: usize,
    spec: *const TvltSpectrogram,
    logit_out: *mut f32,
) -> TvltStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let out = out_ptr(logit_out, "logit_out")?;
        *out = forward(m, pixels, n_values, spec)?.0;
        Ok(())
    })
}
