//! Joint encoder, shared decoder, matching and task heads, checkpoints.

mod checkpoint;
mod config;
mod params;
pub mod transformer;

use std::cell::Cell;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use config::{DecoderMode, EncoderMode, ModelConfig, Preset};
pub use params::{
    block_params, count_head_params, count_params, decoder_specs, embedding_specs,
    encoder_block_prefixes, encoder_specs, init_params, init_task_head, materialize, model_specs,
    task_head_specs, vam_head_specs, Init, ParamBreakdown, ParamSpec,
};

use crate::error::{Error, Result};
use crate::numerics::{Float, Graph, ParamStore, Var};
use crate::tokenizer::{embed_decoder_tokens, embed_encoder_tokens, modality_key, MaskPlan, ModalityMask, PatchCoords, PatchSet};
use transformer::{linear, norm, stack};

/// Encoder output `[1 + Lv + La, d_enc]` with the segment lengths.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub hidden: Var,
    pub lv: usize,
    pub la: usize,
}

impl Encoded {
    pub fn len(&self) -> usize {
        1 + self.lv + self.la
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cls<T: Float>(&self, g: &mut Graph<T>) -> Result<Var> {
        g.slice_rows(self.hidden, 0, 1)
    }

    pub fn vision<T: Float>(&self, g: &mut Graph<T>) -> Result<Var> {
        g.slice_rows(self.hidden, 1, 1 + self.lv)
    }

    pub fn audio<T: Float>(&self, g: &mut Graph<T>) -> Result<Var> {
        g.slice_rows(self.hidden, 1 + self.lv, 1 + self.lv + self.la)
    }
}

fn cls_row<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, d: usize) -> Result<Var> {
    let cls = g.param(store, "embed.cls")?;
    g.reshape(cls, &[1, d])
}

fn embed_opt<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, p: Option<&PatchSet>) -> Result<Option<Var>> {
    match p {
        Some(p) if !p.is_empty() => Ok(Some(embed_encoder_tokens(g, store, p)?)),
        _ => Ok(None),
    }
}

/// Encodes `[CLS] ‖ vision ‖ audio`; either modality may be absent or a
/// visible subset.
pub fn encode<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    vision: Option<&PatchSet>,
    audio: Option<&PatchSet>,
) -> Result<Encoded> {
    let d = cfg.d_enc;
    let ev = embed_opt(g, store, vision)?;
    let ea = embed_opt(g, store, audio)?;
    let lv = ev.map_or(0, |v| g.shape(v)[0]);
    let la = ea.map_or(0, |v| g.shape(v)[0]);
    let (h, eps) = (cfg.n_heads_enc, cfg.ln_eps);
    let cls = cls_row(g, store, d)?;
    let x = match cfg.encoder {
        EncoderMode::Joint => {
            let parts: Vec<Var> = [Some(cls), ev, ea].into_iter().flatten().collect();
            let x = g.concat(&parts)?;
            stack(g, store, "encoder.blocks", cfg.n_enc_layers, x, h, eps)?
        }
        EncoderMode::Separate => {
            let hv = ev
                .map(|x| stack(g, store, "encoder.vision.blocks", cfg.n_enc_layers, x, h, eps))
                .transpose()?;
            let ha = ea
                .map(|x| stack(g, store, "encoder.audio.blocks", cfg.n_enc_layers, x, h, eps))
                .transpose()?;
            let parts: Vec<Var> = [Some(cls), hv, ha].into_iter().flatten().collect();
            let x = g.concat(&parts)?;
            stack(g, store, "encoder.fusion.blocks", cfg.fusion_layers, x, h, eps)?
        }
    };
    let hidden = norm(g, store, "encoder.norm", x, eps)?;
    Ok(Encoded { hidden, lv, la })
}

thread_local! {
    static DECODER_CALLS: Cell<u64> = const { Cell::new(0) };
    static DECODER_ATTENTION_PAIRS: Cell<u64> = const { Cell::new(0) };
}

/// Decoder passes run on this thread so far.
pub fn decoder_calls() -> u64 {
    DECODER_CALLS.with(Cell::get)
}

/// Query-key pairs scored by decoder self-attention on this thread so far,
/// summed over layers (heads share the count).
pub fn decoder_attention_pairs() -> u64 {
    DECODER_ATTENTION_PAIRS.with(Cell::get)
}

pub(crate) fn count_attention(prefix: &str, len: usize) {
    if prefix.starts_with("decoder.") {
        DECODER_ATTENTION_PAIRS.with(|c| c.set(c.get() + (len * len) as u64));
    }
}

fn count_decoder_call() {
    DECODER_CALLS.with(|c| c.set(c.get() + 1));
}

/// Bridge to decoder width and scatter into the full grid with `[MASK]` fill.
fn decoder_input<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    visible: Var,
    mask: &ModalityMask,
    coords: &PatchCoords,
) -> Result<Var> {
    let bridged = linear(g, store, "decoder.bridge", visible)?;
    embed_decoder_tokens(g, store, bridged, mask, coords)
}

/// Reconstructs every patch of one modality, `[L_full, patch_dim]`, from the
/// encoder states of its visible tokens.
pub fn decode_modality<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    visible: Var,
    mask: &ModalityMask,
    coords: &PatchCoords,
) -> Result<Var> {
    count_decoder_call();
    let x = decoder_input(g, store, visible, mask, coords)?;
    let x = stack(g, store, "decoder.blocks", cfg.n_dec_layers, x, cfg.n_heads_dec, cfg.ln_eps)?;
    let x = norm(g, store, "decoder.norm", x, cfg.ln_eps)?;
    linear(g, store, &format!("decoder.head.{}", modality_key(coords.modality)), x)
}

/// One decoder pass over both modalities; returns (vision, audio)
/// reconstructions.
#[allow(clippy::too_many_arguments)]
pub fn decode_joint<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    visible_v: Var,
    mask_v: &ModalityMask,
    coords_v: &PatchCoords,
    visible_a: Var,
    mask_a: &ModalityMask,
    coords_a: &PatchCoords,
) -> Result<(Var, Var)> {
    count_decoder_call();
    let xv = decoder_input(g, store, visible_v, mask_v, coords_v)?;
    let xa = decoder_input(g, store, visible_a, mask_a, coords_a)?;
    let x = g.concat(&[xv, xa])?;
    let x = stack(g, store, "decoder.blocks", cfg.n_dec_layers, x, cfg.n_heads_dec, cfg.ln_eps)?;
    let x = norm(g, store, "decoder.norm", x, cfg.ln_eps)?;
    let (lv, la) = (coords_v.len(), coords_a.len());
    let hv = g.slice_rows(x, 0, lv)?;
    let ha = g.slice_rows(x, lv, lv + la)?;
    let rv = linear(g, store, "decoder.head.vision", hv)?;
    let ra = linear(g, store, "decoder.head.audio", ha)?;
    Ok((rv, ra))
}

/// Full-grid reconstructions of both modalities and the encoder length of
/// the visible sequence that produced them.
#[derive(Clone, Copy, Debug)]
pub struct Reconstruction {
    pub vision: Var,
    pub audio: Var,
    pub encoder_len: usize,
}

/// Encodes the tokens `plan` leaves visible and decodes every patch, once per
/// modality or jointly depending on `cfg.decoder`.
pub fn reconstruct<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    vision: &PatchSet,
    audio: &PatchSet,
    plan: &MaskPlan,
) -> Result<Reconstruction> {
    let vis_v = vision.subset(&plan.vision.visible);
    let vis_a = audio.subset(&plan.audio.visible);
    let e = encode(g, store, cfg, Some(&vis_v), Some(&vis_a))?;
    let hv = e.vision(g)?;
    let ha = e.audio(g)?;
    let (rv, ra) = match cfg.decoder {
        DecoderMode::Separate => (
            decode_modality(g, store, cfg, hv, &plan.vision, &vision.coords)?,
            decode_modality(g, store, cfg, ha, &plan.audio, &audio.coords)?,
        ),
        DecoderMode::Joint => decode_joint(
            g,
            store,
            cfg,
            hv,
            &plan.vision,
            &vision.coords,
            ha,
            &plan.audio,
            &audio.coords,
        )?,
    };
    Ok(Reconstruction {
        vision: rv,
        audio: ra,
        encoder_len: e.len(),
    })
}

/// Query-key pairs scored by decoder self-attention per layer.
pub fn attention_pairs(mode: DecoderMode, lv: u64, la: u64) -> u64 {
    match mode {
        DecoderMode::Separate => lv * lv + la * la,
        DecoderMode::Joint => (lv + la) * (lv + la),
    }
}

/// Matching logit from the CLS state (`[1, d]` → `[1, 1]`).
pub fn vam_logit<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, cls: Var) -> Result<Var> {
    linear(g, store, "vam_head", cls)
}

/// Matching probability `σ(logit)`.
pub fn vam_head<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, cls: Var) -> Result<Var> {
    let z = vam_logit(g, store, cls)?;
    Ok(g.sigmoid(z))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum HeadKind {
    /// One sigmoid score.
    Matching,
    /// Independent sigmoid per class.
    MultiLabel { classes: usize },
    /// One unbounded value.
    Regression,
}

impl HeadKind {
    pub fn outputs(&self) -> usize {
        match self {
            HeadKind::MultiLabel { classes } => *classes,
            HeadKind::Matching | HeadKind::Regression => 1,
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    /// `matching`, `regression` or `multi-label:<classes>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "matching" => Ok(HeadKind::Matching),
            None if s == "regression" => Ok(HeadKind::Regression),
            Some(("multi-label", n)) => match n.parse::<usize>() {
                Ok(classes) if classes > 0 => Ok(HeadKind::MultiLabel { classes }),
                _ => Err(Error::config(format!("bad class count `{n}`"))),
            },
            _ => Err(Error::config(format!("unknown head kind `{s}`"))),
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HeadKind::Matching => write!(f, "matching"),
            HeadKind::MultiLabel { classes } => write!(f, "multi-label:{classes}"),
            HeadKind::Regression => write!(f, "regression"),
        }
    }
}

/// Pre-activation head output `[1, outputs]`: `fc2(gelu(fc1(cls)))`.
pub fn task_head_logits<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, cls: Var) -> Result<Var> {
    let h = linear(g, store, "head.fc1", cls)?;
    let h = g.gelu(h);
    linear(g, store, "head.fc2", h)
}

/// Scores after the kind's output activation.
pub fn task_head_forward<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cls: Var,
    kind: &HeadKind,
) -> Result<Var> {
    let expected = kind.outputs();
    let have = store.get("head.fc2.bias")?.numel();
    if have != expected {
        return Err(Error::config(format!(
            "head has {have} outputs, `{kind}` needs {expected}"
        )));
    }
    let z = task_head_logits(g, store, cls)?;
    Ok(match kind {
        HeadKind::Matching | HeadKind::MultiLabel { .. } => g.sigmoid(z),
        HeadKind::Regression => z,
    })
}
