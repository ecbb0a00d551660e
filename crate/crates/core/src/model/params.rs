use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EncoderMode, HeadKind, ModelConfig};
use crate::error::Result;
use crate::numerics::{Float, ParamStore, Tensor};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(out: &mut Vec<ParamSpec>, name: String, shape: &[usize], init: Init) {
    out.push(ParamSpec {
        name,
        shape: shape.to_vec(),
        init,
    });
}

fn linear(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize) {
    spec(out, format!("{prefix}.weight"), &[fan_in, fan_out], Init::TruncNormal);
    spec(out, format!("{prefix}.bias"), &[fan_out], Init::Zeros);
}

fn norm(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    spec(out, format!("{prefix}.weight"), &[d], Init::Ones);
    spec(out, format!("{prefix}.bias"), &[d], Init::Zeros);
}

fn block(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, hidden: usize) {
    norm(out, &format!("{prefix}.ln1"), d);
    for p in ["q", "k", "v", "out"] {
        linear(out, &format!("{prefix}.attn.{p}"), d, d);
    }
    norm(out, &format!("{prefix}.ln2"), d);
    linear(out, &format!("{prefix}.mlp.fc1"), d, hidden);
    linear(out, &format!("{prefix}.mlp.fc2"), hidden, d);
}

fn positional_tables(out: &mut Vec<ParamSpec>, prefix: &str, cfg: &ModelConfig, d: usize) {
    let tn = Init::TruncNormal;
    spec(out, format!("{prefix}.vision.temporal"), &[cfg.max_frames, d], tn);
    spec(out, format!("{prefix}.vision.row"), &[cfg.vision_grid(), d], tn);
    spec(out, format!("{prefix}.vision.col"), &[cfg.vision_grid(), d], tn);
    spec(out, format!("{prefix}.audio.temporal"), &[cfg.max_audio_steps, d], tn);
    spec(out, format!("{prefix}.audio.freq"), &[cfg.audio_bands(), d], tn);
}

pub fn embedding_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_enc;
    let mut out = Vec::new();
    linear(&mut out, "embed.vision.proj", cfg.vision_patch_dim(), d);
    linear(&mut out, "embed.audio.proj", cfg.audio_patch_dim(), d);
    spec(&mut out, "embed.modality".into(), &[2, d], Init::TruncNormal);
    positional_tables(&mut out, "embed", cfg, d);
    spec(&mut out, "embed.cls".into(), &[d], Init::TruncNormal);
    out
}

pub fn encoder_block_prefixes(cfg: &ModelConfig) -> Vec<String> {
    let stack = |name: &'static str, n: usize| (0..n).map(move |i| format!("encoder.{name}.{i}"));
    match cfg.encoder {
        EncoderMode::Joint => stack("blocks", cfg.n_enc_layers).collect(),
        EncoderMode::Separate => stack("vision.blocks", cfg.n_enc_layers)
            .chain(stack("audio.blocks", cfg.n_enc_layers))
            .chain(stack("fusion.blocks", cfg.fusion_layers))
            .collect(),
    }
}

pub fn encoder_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    for p in encoder_block_prefixes(cfg) {
        block(&mut out, &p, cfg.d_enc, cfg.mlp_hidden_enc());
    }
    norm(&mut out, "encoder.norm", cfg.d_enc);
    out
}

pub fn vam_head_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    linear(&mut out, "vam_head", cfg.d_enc, 1);
    out
}

pub fn decoder_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_dec;
    let mut out = Vec::new();
    linear(&mut out, "decoder.bridge", cfg.d_enc, d);
    spec(&mut out, "decoder.mask".into(), &[d], Init::TruncNormal);
    positional_tables(&mut out, "decoder.embed", cfg, d);
    for i in 0..cfg.n_dec_layers {
        block(&mut out, &format!("decoder.blocks.{i}"), d, cfg.mlp_hidden_dec());
    }
    norm(&mut out, "decoder.norm", d);
    linear(&mut out, "decoder.head.vision", d, cfg.vision_patch_dim());
    linear(&mut out, "decoder.head.audio", d, cfg.audio_patch_dim());
    out
}

/// Two-layer MLP over the CLS state: `d → 2d → out`.
pub fn task_head_specs(d_enc: usize, kind: &HeadKind) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    linear(&mut out, "head.fc1", d_enc, 2 * d_enc);
    linear(&mut out, "head.fc2", 2 * d_enc, kind.outputs());
    out
}

/// Every pretraining parameter (embeddings, encoder, VAM head, decoder).
pub fn model_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = embedding_specs(cfg);
    out.extend(encoder_specs(cfg));
    out.extend(vam_head_specs(cfg));
    out.extend(decoder_specs(cfg));
    out
}

/// Truncated normal (±2σ) with σ = 0.02.
fn trunc_normal(rng: &mut impl Rng) -> f64 {
    let n = Normal::new(0.0, 0.02).expect("valid normal");
    loop {
        let x: f64 = n.sample(rng);
        if x.abs() <= 0.04 {
            return x;
        }
    }
}

/// Materializes specs; each tensor draws from its own stream keyed by name so
/// adding a tensor never shifts the values of the others.
pub fn materialize<T: Float>(specs: &[ParamSpec], seed: u64, store: &mut ParamStore<T>) -> Result<()> {
    for s in specs {
        let n: usize = s.shape.iter().product();
        let data: Vec<T> = match s.init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::TruncNormal => {
                let key = s.name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
                    (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
                });
                let mut r = rng::stream(seed, &[0x696e_6974, key]);
                (0..n).map(|_| T::of(trunc_normal(&mut r))).collect()
            }
        };
        store.insert(s.name.clone(), Tensor::new(s.shape.clone(), data)?)?;
    }
    Ok(())
}

pub fn init_params<T: Float>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    materialize(&model_specs(cfg), seed, &mut store)?;
    Ok(store)
}

pub fn init_task_head<T: Float>(
    store: &mut ParamStore<T>,
    d_enc: usize,
    kind: &HeadKind,
    seed: u64,
) -> Result<()> {
    for s in task_head_specs(d_enc, kind) {
        store.remove(&s.name);
    }
    materialize(&task_head_specs(d_enc, kind), seed, store)
}

/// Trainable parameter counts by module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub embeddings: usize,
    pub encoder: usize,
    pub vam_head: usize,
    pub decoder: usize,
    pub total: usize,
}

impl ParamBreakdown {
    /// Embeddings plus encoder stack.
    pub fn encoder_only(&self) -> usize {
        self.embeddings + self.encoder
    }
}

/// Parameters of one pre-norm block: two norms, four `d×d` projections with
/// biases and the `d → h → d` MLP.
pub fn block_params(d: usize, hidden: usize) -> usize {
    2 * 2 * d + 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d)
}

/// Closed-form count, no allocation.
pub fn count_params(cfg: &ModelConfig) -> ParamBreakdown {
    let d = cfg.d_enc;
    let grid = cfg.vision_grid();
    let tables = |w: usize| (cfg.max_frames + 2 * grid + cfg.max_audio_steps + cfg.audio_bands()) * w;
    let embeddings = (cfg.vision_patch_dim() + 1) * d + (cfg.audio_patch_dim() + 1) * d + 2 * d + tables(d) + d;
    let n_blocks = match cfg.encoder {
        EncoderMode::Joint => cfg.n_enc_layers,
        EncoderMode::Separate => 2 * cfg.n_enc_layers + cfg.fusion_layers,
    };
    let encoder = n_blocks * block_params(d, cfg.mlp_hidden_enc()) + 2 * d;
    let vam_head = d + 1;
    let dd = cfg.d_dec;
    let decoder = (d + 1) * dd
        + dd
        + tables(dd)
        + cfg.n_dec_layers * block_params(dd, cfg.mlp_hidden_dec())
        + 2 * dd
        + (dd + 1) * cfg.vision_patch_dim()
        + (dd + 1) * cfg.audio_patch_dim();
    ParamBreakdown {
        embeddings,
        encoder,
        vam_head,
        decoder,
        total: embeddings + encoder + vam_head + decoder,
    }
}

pub fn count_head_params(d_enc: usize, kind: &HeadKind) -> usize {
    (d_enc + 1) * 2 * d_enc + (2 * d_enc + 1) * kind.outputs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DecoderMode, ModelConfig};

    fn sum(specs: &[ParamSpec]) -> usize {
        specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    #[test]
    fn closed_form_matches_the_layout() {
        let mut configs = vec![ModelConfig::desk(), ModelConfig::paper(), ModelConfig::paper_patch_count()];
        let mut sep = ModelConfig::desk();
        sep.encoder = EncoderMode::Separate;
        sep.decoder = DecoderMode::Joint;
        configs.push(sep);
        for cfg in configs {
            let b = count_params(&cfg);
            assert_eq!(b.embeddings, sum(&embedding_specs(&cfg)));
            assert_eq!(b.encoder, sum(&encoder_specs(&cfg)));
            assert_eq!(b.vam_head, sum(&vam_head_specs(&cfg)));
            assert_eq!(b.decoder, sum(&decoder_specs(&cfg)));
        }
        for kind in [HeadKind::Matching, HeadKind::MultiLabel { classes: 7 }, HeadKind::Regression] {
            assert_eq!(count_head_params(64, &kind), sum(&task_head_specs(64, &kind)));
        }
    }

    #[test]
    fn desk_store_matches_count() {
        let cfg = ModelConfig::desk();
        let store = init_params::<f32>(&cfg, 0).unwrap();
        assert_eq!(store.num_scalars(), count_params(&cfg).total);
        assert!(count_params(&cfg).total < 1_000_000);
    }

    #[test]
    fn names_are_unique() {
        let specs = model_specs(&ModelConfig::paper());
        let mut names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        let n = names.len();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = ModelConfig::desk();
        let a = init_params::<f32>(&cfg, 7).unwrap();
        let b = init_params::<f32>(&cfg, 7).unwrap();
        assert_eq!(a, b);
        for (name, t) in a.iter() {
            let max = t.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
            if name.ends_with(".bias") {
                assert_eq!(max, 0.0, "{name}");
            } else if name.contains("ln") || name.ends_with("norm.weight") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            } else {
                assert!(max <= 0.04 && max > 0.0, "{name}");
            }
        }
    }
}
