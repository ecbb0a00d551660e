use serde::{Deserialize, Serialize};

use crate::audio::SpectrogramConfig;
use crate::error::{Error, Result};
use crate::tokenizer::AudioPatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderMode {
    /// One set of transformer weights over the concatenated sequence.
    Joint,
    /// Per-modality encoders followed by a small fusion stack.
    Separate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderMode {
    /// Shared decoder run once per modality.
    Separate,
    /// One decoder pass over both modalities concatenated.
    Joint,
}

impl std::str::FromStr for EncoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "separate" => Ok(Self::Separate),
            _ => Err(Error::config(format!("unknown encoder mode `{s}`"))),
        }
    }
}

impl std::str::FromStr for DecoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "separate" => Ok(Self::Separate),
            _ => Err(Error::config(format!("unknown decoder mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_enc: usize,
    pub n_enc_layers: usize,
    pub n_heads_enc: usize,
    pub d_dec: usize,
    pub n_dec_layers: usize,
    pub n_heads_dec: usize,
    pub mlp_ratio: usize,
    /// Square frame side in pixels.
    pub image_size: usize,
    pub channels: usize,
    pub vision_patch: usize,
    /// Rows of the vision temporal table.
    pub max_frames: usize,
    pub audio_patch: AudioPatch,
    pub n_mels: usize,
    /// Rows of the audio temporal table.
    pub max_audio_steps: usize,
    pub encoder: EncoderMode,
    pub decoder: DecoderMode,
    /// Fusion layers on top of separate encoders.
    pub fusion_layers: usize,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// 768-wide, 12-layer encoder and 512-wide, 8-layer decoder over 8 frames
    /// of 224×224 and 20 s of 44.1 kHz audio.
    pub fn paper() -> Self {
        let spec = SpectrogramConfig::default();
        Self {
            d_enc: 768,
            n_enc_layers: 12,
            n_heads_enc: 12,
            d_dec: 512,
            n_dec_layers: 8,
            n_heads_dec: 8,
            mlp_ratio: 4,
            image_size: 224,
            channels: 3,
            vision_patch: 16,
            max_frames: 8,
            audio_patch: AudioPatch::SQUARE,
            n_mels: spec.n_mels,
            max_audio_steps: AudioPatch::SQUARE.time_steps(spec.n_frames(20 * spec.sample_rate as usize)),
            encoder: EncoderMode::Joint,
            decoder: DecoderMode::Separate,
            fusion_layers: 2,
            ln_eps: 1e-5,
        }
    }

    /// Paper widths with audio resampled to 16384 Hz (32 frames per second).
    pub fn paper_patch_count() -> Self {
        let spec = SpectrogramConfig::resampled_16k();
        Self {
            max_audio_steps: AudioPatch::SQUARE.time_steps(spec.n_frames(20 * spec.sample_rate as usize)),
            ..Self::paper()
        }
    }

    /// Laptop-sized model for 4 frames of 32×32 and 1 s of 16384 Hz audio.
    pub fn desk() -> Self {
        let spec = SpectrogramConfig::resampled_16k();
        Self {
            d_enc: 64,
            n_enc_layers: 2,
            n_heads_enc: 4,
            d_dec: 32,
            n_dec_layers: 2,
            n_heads_dec: 4,
            mlp_ratio: 4,
            image_size: 32,
            channels: 3,
            vision_patch: 16,
            max_frames: 4,
            audio_patch: AudioPatch::SQUARE,
            n_mels: spec.n_mels,
            max_audio_steps: AudioPatch::SQUARE.time_steps(spec.n_frames(spec.sample_rate as usize)),
            encoder: EncoderMode::Joint,
            decoder: DecoderMode::Separate,
            fusion_layers: 2,
            ln_eps: 1e-5,
        }
    }

    /// Sets the audio patch and resizes the audio temporal table so it covers
    /// the same number of spectrogram frames.
    pub fn with_audio_patch(mut self, patch: AudioPatch) -> Self {
        let frames = self.max_audio_steps * self.audio_patch.time;
        self.audio_patch = patch;
        self.max_audio_steps = patch.time_steps(frames);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("d_enc", self.d_enc),
            ("n_enc_layers", self.n_enc_layers),
            ("n_heads_enc", self.n_heads_enc),
            ("d_dec", self.d_dec),
            ("n_dec_layers", self.n_dec_layers),
            ("n_heads_dec", self.n_heads_dec),
            ("mlp_ratio", self.mlp_ratio),
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("vision_patch", self.vision_patch),
            ("max_frames", self.max_frames),
            ("n_mels", self.n_mels),
            ("max_audio_steps", self.max_audio_steps),
            ("audio_patch.time", self.audio_patch.time),
            ("audio_patch.freq", self.audio_patch.freq),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be ≥ 1")));
        }
        if self.d_enc % self.n_heads_enc != 0 {
            return Err(Error::config(format!(
                "d_enc {} not divisible by {} heads",
                self.d_enc, self.n_heads_enc
            )));
        }
        if self.d_dec % self.n_heads_dec != 0 {
            return Err(Error::config(format!(
                "d_dec {} not divisible by {} heads",
                self.d_dec, self.n_heads_dec
            )));
        }
        if self.image_size % self.vision_patch != 0 {
            return Err(Error::config(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.vision_patch
            )));
        }
        if self.n_mels % self.audio_patch.freq != 0 {
            return Err(Error::config(format!(
                "{} mel bands not divisible by patch {}",
                self.n_mels, self.audio_patch
            )));
        }
        if self.encoder == EncoderMode::Separate && self.fusion_layers == 0 {
            return Err(Error::config("separate encoders need ≥ 1 fusion layer"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::config("ln_eps must be > 0"));
        }
        Ok(())
    }

    /// Patches per side of a frame.
    pub fn vision_grid(&self) -> usize {
        self.image_size / self.vision_patch
    }

    pub fn vision_patch_dim(&self) -> usize {
        self.vision_patch * self.vision_patch * self.channels
    }

    pub fn audio_bands(&self) -> usize {
        self.n_mels / self.audio_patch.freq
    }

    pub fn audio_patch_dim(&self) -> usize {
        self.audio_patch.dim()
    }

    pub fn mlp_hidden_enc(&self) -> usize {
        self.d_enc * self.mlp_ratio
    }

    pub fn mlp_hidden_dec(&self) -> usize {
        self.d_dec * self.mlp_ratio
    }
}

/// Named configurations selectable from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    Paper,
    PaperPatchCount,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Desk => ModelConfig::desk(),
            Preset::Paper => ModelConfig::paper(),
            Preset::PaperPatchCount => ModelConfig::paper_patch_count(),
        }
    }

    pub fn spectrogram(self) -> SpectrogramConfig {
        match self {
            Preset::Paper => SpectrogramConfig::default(),
            Preset::Desk | Preset::PaperPatchCount => SpectrogramConfig::resampled_16k(),
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            "paper-patch-count" => Ok(Preset::PaperPatchCount),
            _ => Err(Error::config(format!("unknown preset `{s}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in [Preset::Desk, Preset::Paper, Preset::PaperPatchCount] {
            p.model().validate().unwrap();
        }
    }

    #[test]
    fn table_sizes() {
        assert_eq!(ModelConfig::paper().max_audio_steps, 108);
        assert_eq!(ModelConfig::paper_patch_count().max_audio_steps, 41);
        assert_eq!(ModelConfig::desk().max_audio_steps, 3);
        assert_eq!(ModelConfig::paper().vision_grid(), 14);
        assert_eq!(ModelConfig::paper().vision_patch_dim(), 768);
        assert_eq!(ModelConfig::paper().audio_patch_dim(), 256);
    }

    #[test]
    fn stripe_patches_resize_the_time_table() {
        let c = ModelConfig::desk().with_audio_patch(AudioPatch::STRIPE);
        assert_eq!(c.max_audio_steps, 24);
        assert_eq!(c.audio_bands(), 1);
        c.validate().unwrap();
    }

    #[test]
    fn head_divisibility_is_checked() {
        let mut c = ModelConfig::desk();
        c.n_heads_enc = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
