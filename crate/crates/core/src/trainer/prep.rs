use super::data::{Dataset, NormStats, Sample, SampleLabel};
use crate::audio::{detect_speech_spans, log_mel_spectrogram, SpanConfig, Spectrogram, SpectrogramConfig, SpeechSpan};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tokenizer::{patchify_frames, patchify_spectrogram, PatchSet, VideoClip};

/// Tokenized sample: standardized patches of both modalities plus the speech
/// spans of its waveform.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub vision: PatchSet,
    pub audio: PatchSet,
    pub spans: Vec<SpeechSpan>,
    pub label: SampleLabel,
}

/// Per-channel `(x − mean)/std`.
pub fn standardize_clip(clip: &VideoClip, stats: &NormStats) -> VideoClip {
    let c = clip.channels;
    let data = clip
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i % c;
            ((v as f64 - stats.vision_mean[ch % stats.vision_mean.len()])
                / stats.vision_std[ch % stats.vision_std.len()]) as f32
        })
        .collect();
    VideoClip { data, ..clip.clone() }
}

/// Standardizes log-mel values, the padding floor included.
pub fn standardize_spectrogram(spec: &Spectrogram, stats: &NormStats) -> Spectrogram {
    let f = |v: f64| (v - stats.audio_mean) / stats.audio_std;
    Spectrogram {
        values: spec.values.iter().map(|&v| f(v)).collect(),
        floor_value: f(spec.floor_value),
        ..spec.clone()
    }
}

/// The frames of `sample` the model sees: uniformly strided down to
/// `cfg.max_frames`.
pub fn model_clip(sample: &Sample, cfg: &ModelConfig) -> Result<VideoClip> {
    if sample.clip.frames == cfg.max_frames {
        Ok(sample.clip.clone())
    } else {
        sample.clip.sample_frames(cfg.max_frames.min(sample.clip.frames))
    }
}

pub fn prepare_sample(
    sample: &Sample,
    cfg: &ModelConfig,
    spec_cfg: &SpectrogramConfig,
    stats: &NormStats,
) -> Result<Prepared> {
    let clip = model_clip(sample, cfg)?;
    if clip.height != cfg.image_size || clip.width != cfg.image_size || clip.channels != cfg.channels {
        return Err(Error::config(format!(
            "sample {} is {}×{}×{}, model expects {}×{}×{}",
            sample.label.id, clip.height, clip.width, clip.channels, cfg.image_size, cfg.image_size, cfg.channels
        )));
    }
    let vision = patchify_frames(&standardize_clip(&clip, stats), cfg.vision_patch)?;
    let spec = log_mel_spectrogram(&sample.wave, spec_cfg)?;
    let audio = patchify_spectrogram(&standardize_spectrogram(&spec, stats), cfg.audio_patch)?;
    let spans = detect_speech_spans(&sample.wave, &SpanConfig::default());
    Ok(Prepared {
        vision,
        audio,
        spans,
        label: sample.label.clone(),
    })
}

pub fn prepare_dataset(ds: &Dataset, cfg: &ModelConfig) -> Result<Vec<Prepared>> {
    ds.samples
        .iter()
        .map(|s| prepare_sample(s, cfg, &ds.manifest.spectrogram, &ds.manifest.stats))
        .collect()
}
