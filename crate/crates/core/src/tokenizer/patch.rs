use serde::{Deserialize, Serialize};

use crate::audio::Spectrogram;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vision,
    Audio,
}

impl Modality {
    pub fn index(self) -> usize {
        match self {
            Modality::Vision => 0,
            Modality::Audio => 1,
        }
    }
}

/// `N × H × W × C` frames; `N == 1` is a still image.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl VideoClip {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape("video clip extents must be positive"));
        }
        if data.len() != frames * height * width * channels {
            return Err(Error::shape(format!(
                "clip {frames}×{height}×{width}×{channels} needs {} values, got {}",
                frames * height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn pixel(&self, n: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[((n * self.height + y) * self.width + x) * self.channels + c]
    }

    /// Frames `floor(i·F/N)` for `i in 0..n`.
    pub fn sample_frames(&self, n: usize) -> Result<Self> {
        let idx = uniform_frame_indices(self.frames, n)?;
        let len = self.frame_len();
        let data = idx
            .iter()
            .flat_map(|&f| self.data[f * len..(f + 1) * len].iter().copied())
            .collect();
        Self::new(n, self.height, self.width, self.channels, data)
    }
}

/// Uniform-stride frame selection `floor(i·available/n)`.
pub fn uniform_frame_indices(available: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || available == 0 {
        return Err(Error::contract("frame sampling needs n ≥ 1 and a non-empty clip"));
    }
    Ok((0..n).map(|i| i * available / n).collect())
}

/// Grid position of a token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "modality", rename_all = "lowercase")]
pub enum TokenCoord {
    Vision { frame: usize, row: usize, col: usize },
    Audio { time: usize, freq: usize },
}

/// Coordinates of every token of one modality, in token order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchCoords {
    pub modality: Modality,
    /// `[frames, rows, cols]` for vision, `[time, freq, 1]` for audio.
    pub grid: [usize; 3],
    /// Seconds spanned by one step along the audio time axis.
    pub seconds_per_step: Option<f64>,
    pub tokens: Vec<TokenCoord>,
}

impl PatchCoords {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens per time step (per frame for vision, per time slot for audio).
    pub fn per_step(&self) -> usize {
        self.grid[1] * self.grid[2]
    }

    pub fn steps(&self) -> usize {
        self.grid[0]
    }

    /// Token index of a coordinate (inverse of `tokens[i]`).
    pub fn index_of(&self, c: TokenCoord) -> Option<usize> {
        let [_, a, b] = self.grid;
        let idx = match c {
            TokenCoord::Vision { frame, row, col } => (frame * a + row) * b + col,
            TokenCoord::Audio { time, freq } => time * a + freq,
        };
        (idx < self.tokens.len() && self.tokens[idx] == c).then_some(idx)
    }

    /// Time interval (seconds) covered by an audio token.
    pub fn token_time_range(&self, idx: usize) -> Option<(f64, f64)> {
        let step = self.seconds_per_step?;
        match self.tokens.get(idx)? {
            TokenCoord::Audio { time, .. } => Some((*time as f64 * step, (*time + 1) as f64 * step)),
            TokenCoord::Vision { .. } => None,
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            tokens: idx.iter().map(|&i| self.tokens[i]).collect(),
            ..self.clone()
        }
    }
}

/// Flattened patch vectors (`len × patch_dim`, row-major) with coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub patch_dim: usize,
    pub data: Vec<f64>,
    pub coords: PatchCoords,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        &self.data[i * self.patch_dim..(i + 1) * self.patch_dim]
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            patch_dim: self.patch_dim,
            data: idx.iter().flat_map(|&i| self.patch(i).iter().copied()).collect(),
            coords: self.coords.subset(idx),
        }
    }

    /// `(x − mean) / std` on every element.
    pub fn standardize(&mut self, mean: f64, std: f64) {
        for v in &mut self.data {
            *v = (*v - mean) / std;
        }
    }
}

/// Cuts each frame into `p × p × C` blocks, token order (frame, row, col).
pub fn patchify_frames(clip: &VideoClip, p: usize) -> Result<PatchSet> {
    if p == 0 || clip.height % p != 0 || clip.width % p != 0 {
        return Err(Error::shape(format!(
            "frame {}×{} is not divisible into {p}×{p} patches",
            clip.height, clip.width
        )));
    }
    let (rows, cols) = (clip.height / p, clip.width / p);
    let patch_dim = p * p * clip.channels;
    let mut data = Vec::with_capacity(clip.frames * rows * cols * patch_dim);
    let mut tokens = Vec::with_capacity(clip.frames * rows * cols);
    for frame in 0..clip.frames {
        for row in 0..rows {
            for col in 0..cols {
                for y in 0..p {
                    let start = ((frame * clip.height + row * p + y) * clip.width + col * p) * clip.channels;
                    data.extend(clip.data[start..start + p * clip.channels].iter().map(|&v| v as f64));
                }
                tokens.push(TokenCoord::Vision { frame, row, col });
            }
        }
    }
    Ok(PatchSet {
        patch_dim,
        data,
        coords: PatchCoords {
            modality: Modality::Vision,
            grid: [clip.frames, rows, cols],
            seconds_per_step: None,
            tokens,
        },
    })
}

/// Inverse of [`patchify_frames`].
pub fn unpatchify_frames(patches: &PatchSet, p: usize, channels: usize) -> Result<VideoClip> {
    let [frames, rows, cols] = patches.coords.grid;
    if patches.patch_dim != p * p * channels || patches.len() != frames * rows * cols {
        return Err(Error::shape("patch set does not match the requested geometry"));
    }
    let (height, width) = (rows * p, cols * p);
    let mut data = vec![0.0f32; frames * height * width * channels];
    for (i, c) in patches.coords.tokens.iter().enumerate() {
        let TokenCoord::Vision { frame, row, col } = *c else {
            return Err(Error::shape("audio token in a vision patch set"));
        };
        let patch = patches.patch(i);
        for y in 0..p {
            let start = ((frame * height + row * p + y) * width + col * p) * channels;
            for (dst, &src) in data[start..start + p * channels]
                .iter_mut()
                .zip(&patch[y * p * channels..(y + 1) * p * channels])
            {
                *dst = src as f32;
            }
        }
    }
    VideoClip::new(frames, height, width, channels, data)
}

/// Spectrogram patch extents (time × frequency).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioPatch {
    pub time: usize,
    pub freq: usize,
}

impl AudioPatch {
    pub const SQUARE: AudioPatch = AudioPatch { time: 16, freq: 16 };
    pub const STRIPE: AudioPatch = AudioPatch { time: 2, freq: 128 };

    pub fn dim(&self) -> usize {
        self.time * self.freq
    }

    /// Time-patch count for `n_frames` spectrogram frames after padding.
    pub fn time_steps(&self, n_frames: usize) -> usize {
        n_frames.div_ceil(self.time)
    }
}

impl std::fmt::Display for AudioPatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.time, self.freq)
    }
}

impl std::str::FromStr for AudioPatch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (t, f) = s
            .split_once('x')
            .ok_or_else(|| Error::config(format!("audio patch `{s}` is not TxF")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad audio patch extent `{v}`")))
        };
        Ok(AudioPatch {
            time: parse(t)?,
            freq: parse(f)?,
        })
    }
}

/// Cuts a spectrogram into `time × freq` patches after padding the time axis
/// with the floor value; token order (time, freq).
pub fn patchify_spectrogram(spec: &Spectrogram, patch: AudioPatch) -> Result<PatchSet> {
    if patch.time == 0 || patch.freq == 0 || spec.n_mels % patch.freq != 0 {
        return Err(Error::shape(format!(
            "{} mel bands not divisible into {patch} patches",
            spec.n_mels
        )));
    }
    let steps = patch.time_steps(spec.n_frames);
    let bands = spec.n_mels / patch.freq;
    let value = |frame: usize, mel: usize| {
        if frame < spec.n_frames {
            spec.at(frame, mel)
        } else {
            spec.floor_value
        }
    };
    let mut data = Vec::with_capacity(steps * bands * patch.dim());
    let mut tokens = Vec::with_capacity(steps * bands);
    for time in 0..steps {
        for freq in 0..bands {
            for a in 0..patch.time {
                for b in 0..patch.freq {
                    data.push(value(time * patch.time + a, freq * patch.freq + b));
                }
            }
            tokens.push(TokenCoord::Audio { time, freq });
        }
    }
    Ok(PatchSet {
        patch_dim: patch.dim(),
        data,
        coords: PatchCoords {
            modality: Modality::Audio,
            grid: [steps, bands, 1],
            seconds_per_step: Some(patch.time as f64 / spec.frame_rate),
            tokens,
        },
    })
}

/// Reassembles padded `frames × n_mels` values from audio patches.
pub fn unpatchify_spectrogram(patches: &PatchSet, patch: AudioPatch) -> Result<(usize, usize, Vec<f64>)> {
    let [steps, bands, _] = patches.coords.grid;
    if patches.patch_dim != patch.dim() || patches.len() != steps * bands {
        return Err(Error::shape("patch set does not match the requested geometry"));
    }
    let (frames, mels) = (steps * patch.time, bands * patch.freq);
    let mut out = vec![0.0; frames * mels];
    for (i, c) in patches.coords.tokens.iter().enumerate() {
        let TokenCoord::Audio { time, freq } = *c else {
            return Err(Error::shape("vision token in an audio patch set"));
        };
        let p = patches.patch(i);
        for a in 0..patch.time {
            for b in 0..patch.freq {
                out[(time * patch.time + a) * mels + freq * patch.freq + b] = p[a * patch.freq + b];
            }
        }
    }
    Ok((frames, mels, out))
}
