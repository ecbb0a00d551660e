//! Synthetic paired clips: a bright square stepping along a row band, and a
//! tone whose mel bin encodes the same band.
//!
//! Layout on disk:
//! `manifest.json`, `samples/<id>/frames.tvt`, `samples/<id>/audio.wav`,
//! `samples/<id>/label.json`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{load_wav, log_mel_spectrogram, mel_center_frequencies, to_i16, write_wav, SpectrogramConfig, Waveform};
use crate::error::{Error, Result};
use crate::numerics::{tvt, Tensor};
use crate::rng;
use crate::tokenizer::VideoClip;

pub const DATASET_FORMAT: &str = "tvlt-synthetic/1";
/// Row bands (and matching mel-bin bands).
pub const BANDS: usize = 4;
/// Horizontal cells the square steps through, one per frame, wrapping.
pub const COLUMNS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub frame_size: usize,
    pub frames: usize,
    pub audio_seconds: f64,
    pub sample_rate: u32,
    /// Correspondence rule; only `row-band-to-mel-band` exists.
    pub rule: String,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 8,
            frame_size: 32,
            frames: 4,
            audio_seconds: 1.0,
            sample_rate: 16384,
            rule: "row-band-to-mel-band".into(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rule != "row-band-to-mel-band" {
            return Err(Error::config(format!("unknown correspondence rule `{}`", self.rule)));
        }
        if self.frame_size == 0 || self.frame_size % BANDS != 0 || self.frame_size % COLUMNS != 0 {
            return Err(Error::config(format!(
                "frame size {} must be a positive multiple of {BANDS} and {COLUMNS}",
                self.frame_size
            )));
        }
        if self.frames == 0 || !(self.audio_seconds > 0.0) || self.sample_rate == 0 {
            return Err(Error::config("frames, audio length and sample rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleLabel {
    pub id: String,
    pub row_band: usize,
    pub column: usize,
    pub mel_bin: usize,
    pub tone_hz: f64,
    /// Class index for multi-label heads (the row band).
    pub class: usize,
    /// Signed target for regression heads.
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub vision_mean: Vec<f64>,
    pub vision_std: Vec<f64>,
    pub audio_mean: f64,
    pub audio_std: f64,
}

impl Default for NormStats {
    fn default() -> Self {
        Self {
            vision_mean: vec![0.0; 3],
            vision_std: vec![1.0; 3],
            audio_mean: 0.0,
            audio_std: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub spec: SyntheticSpec,
    pub spectrogram: SpectrogramConfig,
    pub stats: NormStats,
    pub samples: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub clip: VideoClip,
    pub wave: Waveform,
    pub label: SampleLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Mel bin carrying the tone for a (band, column) pair.
pub fn tone_bin(n_mels: usize, band: usize, column: usize) -> usize {
    let width = n_mels / BANDS;
    band * width + width / 8 + column * (width / 4)
}

fn render_clip(spec: &SyntheticSpec, band: usize, column: usize, rng: &mut impl Rng) -> Result<VideoClip> {
    let s = spec.frame_size;
    let (h, w) = (s / BANDS, s / COLUMNS);
    let y0 = band * h;
    let mut data = Vec::with_capacity(spec.frames * s * s * 3);
    for f in 0..spec.frames {
        let x0 = ((column + f) % COLUMNS) * w;
        for y in 0..s {
            for x in 0..s {
                let inside = (y0..y0 + h).contains(&y) && (x0..x0 + w).contains(&x);
                for _ in 0..3 {
                    let noise: f32 = rng.random_range(-0.05..0.05);
                    data.push(if inside { 1.0 } else { 0.1 } + noise);
                }
            }
        }
    }
    VideoClip::new(spec.frames, s, s, 3, data)
}

fn render_tone(spec: &SyntheticSpec, hz: f64) -> Result<Waveform> {
    let sr = spec.sample_rate as f64;
    let n = (spec.audio_seconds * sr).round() as usize;
    let (on, off) = (0.1 * spec.audio_seconds, 0.9 * spec.audio_seconds);
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let v = if t >= on && t < off {
                0.5 * (2.0 * std::f64::consts::PI * hz * t).sin()
            } else {
                0.0
            };
            // quantize so the in-memory copy equals what the WAV stores
            to_i16(v) as f64 / 32768.0
        })
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

/// Per-channel pixel statistics and global log-mel statistics.
pub fn compute_stats(samples: &[Sample], spec_cfg: &SpectrogramConfig) -> Result<NormStats> {
    if samples.is_empty() {
        return Ok(NormStats::default());
    }
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut count = 0usize;
    for s in samples {
        for px in s.clip.data.chunks_exact(3) {
            for c in 0..3 {
                let v = px[c] as f64;
                sum[c] += v;
                sq[c] += v * v;
            }
            count += 1;
        }
    }
    let n = count as f64;
    let vision_mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let vision_std: Vec<f64> = (0..3)
        .map(|c| (sq[c] / n - vision_mean[c].powi(2)).max(1e-12).sqrt())
        .collect();
    let (mut asum, mut asq, mut an) = (0.0, 0.0, 0.0);
    for s in samples {
        let spec = log_mel_spectrogram(&s.wave, spec_cfg)?;
        for &v in &spec.values {
            asum += v;
            asq += v * v;
            an += 1.0;
        }
    }
    let audio_mean = asum / an;
    let audio_std = (asq / an - audio_mean * audio_mean).max(1e-12).sqrt();
    Ok(NormStats {
        vision_mean,
        vision_std,
        audio_mean,
        audio_std,
    })
}

/// Builds the dataset in memory; identical seeds give identical datasets.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let spec_cfg = SpectrogramConfig {
        sample_rate: spec.sample_rate,
        ..SpectrogramConfig::resampled_16k()
    };
    spec_cfg.validate()?;
    let centers = mel_center_frequencies(&spec_cfg);
    let mut pairs: Vec<(usize, usize)> = (0..BANDS).flat_map(|b| (0..COLUMNS).map(move |c| (b, c))).collect();
    pairs.shuffle(&mut rng::stream(spec.seed, &[0x7061_6972]));
    let mut samples = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let (band, column) = pairs[i % pairs.len()];
        let mut r = rng::stream(spec.seed, &[0x7361_6d70, i as u64]);
        let mel_bin = tone_bin(spec_cfg.n_mels, band, column);
        let tone_hz = centers[mel_bin];
        let id = format!("{i:04}");
        samples.push(Sample {
            clip: render_clip(spec, band, column, &mut r)?,
            wave: render_tone(spec, tone_hz)?,
            label: SampleLabel {
                id,
                row_band: band,
                column,
                mel_bin,
                tone_hz,
                class: band,
                value: (band as f64 - 1.5) / 1.5,
            },
        });
    }
    let stats = compute_stats(&samples, &spec_cfg)?;
    Ok(Dataset {
        manifest: DatasetManifest {
            format: DATASET_FORMAT.into(),
            spec: spec.clone(),
            spectrogram: spec_cfg,
            stats,
            samples: samples.iter().map(|s| s.label.id.clone()).collect(),
        },
        samples,
    })
}

fn dir_is_nonempty(dir: &Path) -> Result<bool> {
    Ok(dir.exists() && std::fs::read_dir(dir)?.next().is_some())
}

pub fn write_dataset(ds: &Dataset, dir: &Path, force: bool) -> Result<()> {
    if dir_is_nonempty(dir)? {
        if !force {
            return Err(Error::NonEmptyDir(dir.to_path_buf()));
        }
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::create_dir_all(dir.join("samples"))?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&ds.manifest)?)?;
    for s in &ds.samples {
        let sd = dir.join("samples").join(&s.label.id);
        std::fs::create_dir_all(&sd)?;
        let c = &s.clip;
        let t = Tensor::new(vec![c.frames, c.height, c.width, c.channels], c.data.clone())?;
        tvt::write(&sd.join("frames.tvt"), &t)?;
        write_wav(&sd.join("audio.wav"), &s.wave)?;
        std::fs::write(sd.join("label.json"), serde_json::to_vec_pretty(&s.label)?)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Format(format!("unknown dataset format `{}`", manifest.format)));
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for id in &manifest.samples {
        let sd = dir.join("samples").join(id);
        let t: Tensor<f32> = tvt::read(&sd.join("frames.tvt"))?;
        let &[n, h, w, c] = t.shape() else {
            return Err(Error::Format(format!("frames of sample {id} are not rank 4")));
        };
        let clip = VideoClip::new(n, h, w, c, t.into_data())?;
        let wave = load_wav(&sd.join("audio.wav"))?;
        let label: SampleLabel = serde_json::from_slice(&std::fs::read(sd.join("label.json"))?)?;
        samples.push(Sample { clip, wave, label });
    }
    Ok(Dataset { manifest, samples })
}
