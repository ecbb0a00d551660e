//! Reconstruction images. Intensity 0 is reserved for masked regions; every
//! other value is mapped into 1..=255 so a masked pixel can never be confused
//! with a dark one.

use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{reconstruct, Checkpoint};
use crate::numerics::Graph;
use crate::tokenizer::{unpatchify_frames, unpatchify_spectrogram, AudioPatch, MaskPlan, PatchSet, VideoClip};
use crate::trainer::{NormStats, Prepared};

/// Unit interval to 1..=255.
pub fn quantize(v: f64) -> u8 {
    1 + (v.clamp(0.0, 1.0) * 254.0).round() as u8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionGeometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Patches per frame side.
    pub grid: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioGeometry {
    /// Image width: spectrogram frames after padding to whole patches.
    pub frames: usize,
    /// Image height; row 0 holds the highest mel bin.
    pub mels: usize,
    pub patch: AudioPatch,
    pub bands: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderedImages {
    pub vision_masked: Vec<String>,
    pub vision_recon: Vec<String>,
    pub vision_target: Vec<String>,
    pub audio_masked: String,
    pub audio_recon: String,
    pub audio_target: String,
}

/// `plan.json`: everything needed to check the images against the mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub sample: String,
    pub plan: MaskPlan,
    pub vision: VisionGeometry,
    pub audio: AudioGeometry,
    pub images: RenderedImages,
}

fn save_rgb(clip: &VideoClip, px: impl Fn(usize, usize, usize) -> u8, path: &Path) -> Result<()> {
    let img: RgbImage = ImageBuffer::from_fn(clip.width as u32, clip.height as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([px(y, x, 0), px(y, x, 1), px(y, x, 2)])
    });
    img.save(path)?;
    Ok(())
}

fn destandardize_clip(clip: &VideoClip, stats: &NormStats) -> VideoClip {
    let c = clip.channels;
    let data = clip
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i % c;
            (v as f64 * stats.vision_std[ch % stats.vision_std.len()] + stats.vision_mean[ch % stats.vision_mean.len()]) as f32
        })
        .collect();
    VideoClip { data, ..clip.clone() }
}

/// Runs the checkpoint on `sample` under `plan` and writes masked input,
/// reconstruction and target images for both modalities into `dir`.
pub fn render_reconstruction(
    ckpt: &Checkpoint,
    sample: &Prepared,
    raw_clip: &VideoClip,
    stats: &NormStats,
    plan: &MaskPlan,
    dir: &Path,
) -> Result<PlanRecord> {
    let cfg = &ckpt.config;
    if raw_clip.channels != 3 {
        return Err(Error::config(format!("rendering needs 3 channels, clip has {}", raw_clip.channels)));
    }
    let mut g = Graph::<f32>::new();
    let r = reconstruct(&mut g, &ckpt.params, cfg, &sample.vision, &sample.audio, plan)?;
    let (rv, ra) = (g.value(r.vision).to_f64_vec(), g.value(r.audio).to_f64_vec());
    if !rv.iter().chain(&ra).all(|v| v.is_finite()) {
        return Err(Error::Numeric("reconstruction has non-finite values".into()));
    }
    std::fs::create_dir_all(dir)?;
    let p = cfg.vision_patch;
    let grid = raw_clip.width / p;
    let per_frame = sample.vision.coords.per_step();

    let recon_set = PatchSet {
        data: rv,
        ..sample.vision.clone()
    };
    let recon_clip = destandardize_clip(&unpatchify_frames(&recon_set, p, raw_clip.channels)?, stats);
    let token_at = |f: usize, y: usize, x: usize| f * per_frame + (y / p) * grid + x / p;

    let mut images = RenderedImages {
        vision_masked: Vec::new(),
        vision_recon: Vec::new(),
        vision_target: Vec::new(),
        audio_masked: "audio_masked.png".into(),
        audio_recon: "audio_recon.png".into(),
        audio_target: "audio_target.png".into(),
    };
    for f in 0..raw_clip.frames {
        let name = |kind: &str| format!("vision_f{f}_{kind}.png");
        let target = |y, x, c| quantize(raw_clip.pixel(f, y, x, c) as f64);
        save_rgb(raw_clip, target, &dir.join(name("target")))?;
        save_rgb(
            raw_clip,
            |y, x, c| if plan.vision.is_masked(token_at(f, y, x)) { 0 } else { target(y, x, c) },
            &dir.join(name("masked")),
        )?;
        save_rgb(raw_clip, |y, x, c| quantize(recon_clip.pixel(f, y, x, c) as f64), &dir.join(name("recon")))?;
        images.vision_target.push(name("target"));
        images.vision_masked.push(name("masked"));
        images.vision_recon.push(name("recon"));
    }

    let patch = cfg.audio_patch;
    let (frames, mels, target) = unpatchify_spectrogram(&sample.audio, patch)?;
    let recon_audio = PatchSet {
        data: ra,
        ..sample.audio.clone()
    };
    let (_, _, recon) = unpatchify_spectrogram(&recon_audio, patch)?;
    // both grids are standardized log-mel; scale by the target's range
    let lo = target.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = target.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bands = mels / patch.freq;
    let gray = |values: &[f64], masked: bool, path: &Path| -> Result<()> {
        let img: GrayImage = ImageBuffer::from_fn(frames as u32, mels as u32, |x, y| {
            let (t, m) = (x as usize, mels - 1 - y as usize);
            let token = (t / patch.time) * bands + m / patch.freq;
            if masked && plan.audio.is_masked(token) {
                Luma([0])
            } else {
                Luma([quantize((values[t * mels + m] - lo) / span)])
            }
        });
        img.save(path)?;
        Ok(())
    };
    gray(&target, false, &dir.join(&images.audio_target))?;
    gray(&target, true, &dir.join(&images.audio_masked))?;
    gray(&recon, false, &dir.join(&images.audio_recon))?;

    let record = PlanRecord {
        sample: sample.label.id.clone(),
        plan: plan.clone(),
        vision: VisionGeometry {
            frames: raw_clip.frames,
            height: raw_clip.height,
            width: raw_clip.width,
            patch: p,
            grid,
        },
        audio: AudioGeometry { frames, mels, patch, bands },
        images,
    };
    let mut bytes = serde_json::to_vec_pretty(&record)?;
    bytes.push(b'\n');
    std::fs::write(dir.join("plan.json"), bytes)?;
    Ok(record)
}

/// Paths of every image a record names, relative to `dir`.
pub fn image_paths(record: &PlanRecord, dir: &Path) -> Vec<PathBuf> {
    let i = &record.images;
    i.vision_masked
        .iter()
        .chain(&i.vision_recon)
        .chain(&i.vision_target)
        .chain([&i.audio_masked, &i.audio_recon, &i.audio_target])
        .map(|n| dir.join(n))
        .collect()
}
