use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Modality, PatchCoords};
use crate::audio::SpeechSpan;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskStrategy {
    Uniform,
    SpeechSpan,
}

/// Visible/masked partition of one modality's token indices (both sorted).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityMask {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl ModalityMask {
    pub fn len(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn from_masked(total: usize, mut masked: Vec<usize>) -> Self {
        masked.sort_unstable();
        let mut is_masked = vec![false; total];
        for &m in &masked {
            is_masked[m] = true;
        }
        let visible = (0..total).filter(|&i| !is_masked[i]).collect();
        Self { visible, masked }
    }

    pub fn is_masked(&self, idx: usize) -> bool {
        self.masked.binary_search(&idx).is_ok()
    }

    /// Checks the partition invariant against a token count.
    pub fn validate(&self, total: usize) -> Result<()> {
        let mut seen = vec![false; total];
        for &i in self.visible.iter().chain(&self.masked) {
            if i >= total || std::mem::replace(&mut seen[i], true) {
                return Err(Error::contract(format!(
                    "mask index {i} repeated or out of range for {total} tokens"
                )));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::contract("mask plan does not cover every token"));
        }
        if self.visible.is_empty() || self.masked.is_empty() {
            return Err(Error::contract("mask plan needs ≥1 visible and ≥1 masked token"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub seed: u64,
    /// Strategy used for the audio tokens; vision is always uniform per frame.
    pub strategy: MaskStrategy,
    pub vision: ModalityMask,
    pub audio: ModalityMask,
}

impl MaskPlan {
    pub fn modality(&self, m: Modality) -> &ModalityMask {
        match m {
            Modality::Vision => &self.vision,
            Modality::Audio => &self.audio,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskOptions {
    pub ratio: f64,
    /// Per-sample probability of restricting audio masking to speech spans.
    pub span_prob: f64,
}

impl Default for MaskOptions {
    fn default() -> Self {
        Self {
            ratio: 0.75,
            span_prob: 0.15,
        }
    }
}

/// Masked count for `n` tokens: nearest integer to `ratio·n`, clamped so at
/// least one token stays visible and one is masked.
pub fn mask_quota(ratio: f64, n: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::contract(format!("mask ratio {ratio} outside (0, 1)")));
    }
    if n < 2 {
        return Err(Error::contract(format!(
            "cannot mask {n} token(s) while keeping one visible and one masked"
        )));
    }
    Ok(((ratio * n as f64).round() as usize).clamp(1, n - 1))
}

/// Audio tokens whose time range intersects any span.
pub fn span_pool(audio: &PatchCoords, spans: &[SpeechSpan]) -> Vec<usize> {
    (0..audio.len())
        .filter(|&i| {
            audio
                .token_time_range(i)
                .is_some_and(|(s, e)| spans.iter().any(|sp| sp.intersects(s, e)))
        })
        .collect()
}

fn choose(rng: &mut impl Rng, from: &[usize], k: usize) -> Vec<usize> {
    sample(rng, from.len(), k).into_iter().map(|i| from[i]).collect()
}

/// Draws a mask plan: vision masked per frame independently, audio masked
/// uniformly or (with probability `span_prob`) inside detected speech spans,
/// topped up uniformly when the span pool is smaller than the quota.
pub fn sample_mask_plan(
    vision: &PatchCoords,
    audio: &PatchCoords,
    opts: &MaskOptions,
    spans: Option<&[SpeechSpan]>,
    seed: u64,
) -> Result<MaskPlan> {
    if vision.is_empty() || audio.is_empty() {
        return Err(Error::contract("mask plan over an empty token list"));
    }
    let mut rng = rng::stream(seed, &[0x6d61_736b]);

    let per_frame = vision.per_step();
    let frame_quota = mask_quota(opts.ratio, per_frame)?;
    let mut vision_masked = Vec::with_capacity(frame_quota * vision.steps());
    for f in 0..vision.steps() {
        let frame_tokens: Vec<usize> = (f * per_frame..(f + 1) * per_frame).collect();
        vision_masked.extend(choose(&mut rng, &frame_tokens, frame_quota));
    }

    let audio_quota = mask_quota(opts.ratio, audio.len())?;
    let coin: f64 = rng.random();
    let spans = spans.unwrap_or(&[]);
    let (strategy, audio_masked) = if !spans.is_empty() && coin < opts.span_prob {
        let pool = span_pool(audio, spans);
        let masked = if pool.len() >= audio_quota {
            choose(&mut rng, &pool, audio_quota)
        } else {
            let rest: Vec<usize> = (0..audio.len()).filter(|i| pool.binary_search(i).is_err()).collect();
            let mut m = pool.clone();
            m.extend(choose(&mut rng, &rest, audio_quota - pool.len()));
            m
        };
        (MaskStrategy::SpeechSpan, masked)
    } else {
        let all: Vec<usize> = (0..audio.len()).collect();
        (MaskStrategy::Uniform, choose(&mut rng, &all, audio_quota))
    };

    Ok(MaskPlan {
        seed,
        strategy,
        vision: ModalityMask::from_masked(vision.len(), vision_masked),
        audio: ModalityMask::from_masked(audio.len(), audio_masked),
    })
}
