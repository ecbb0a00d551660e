//! Token embeddings: patch projection plus modality and positional tables.
//!
//! Encoder tables live under `embed.*`, decoder tables under
//! `decoder.embed.*`. Vision tokens use temporal/row/column tables and audio
//! tokens temporal/frequency tables; the vision temporal table is skipped for
//! single-frame inputs.

use super::{Modality, ModalityMask, PatchCoords, PatchSet, TokenCoord};
use crate::error::{Error, Result};
use crate::numerics::{Float, Graph, ParamStore, Tensor, Var};

pub fn modality_key(m: Modality) -> &'static str {
    match m {
        Modality::Vision => "vision",
        Modality::Audio => "audio",
    }
}

/// Patch vectors as an `[L, patch_dim]` tensor.
pub fn patch_tensor<T: Float>(patches: &PatchSet) -> Result<Tensor<T>> {
    Tensor::from_f64(&[patches.len(), patches.patch_dim], &patches.data)
}

fn lookup<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    name: &str,
    idx: &[usize],
) -> Result<Var> {
    let rows = store.get(name)?.shape()[0];
    if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
        return Err(Error::Capacity(format!(
            "position {bad} exceeds table `{name}` with {rows} rows"
        )));
    }
    let table = g.param(store, name)?;
    g.gather(table, idx)
}

/// Per-axis position indices and the table suffix for each axis.
pub fn positional_axes(coords: &PatchCoords) -> Vec<(&'static str, Vec<usize>)> {
    match coords.modality {
        Modality::Vision => {
            let mut axes = Vec::new();
            if coords.grid[0] > 1 {
                axes.push(("temporal", pick(coords, |c| c.0)));
            }
            axes.push(("row", pick(coords, |c| c.1)));
            axes.push(("col", pick(coords, |c| c.2)));
            axes
        }
        Modality::Audio => vec![
            ("temporal", pick(coords, |c| c.0)),
            ("freq", pick(coords, |c| c.1)),
        ],
    }
}

fn pick(coords: &PatchCoords, f: impl Fn((usize, usize, usize)) -> usize) -> Vec<usize> {
    coords
        .tokens
        .iter()
        .map(|t| match *t {
            TokenCoord::Vision { frame, row, col } => f((frame, row, col)),
            TokenCoord::Audio { time, freq } => f((time, freq, 0)),
        })
        .collect()
}

/// Sum of the positional table rows under `prefix` (`embed` or
/// `decoder.embed`), shape `[L, d]`.
pub fn positional<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    coords: &PatchCoords,
) -> Result<Var> {
    let key = modality_key(coords.modality);
    let mut acc: Option<Var> = None;
    for (axis, idx) in positional_axes(coords) {
        let rows = lookup(g, store, &format!("{prefix}.{key}.{axis}"), &idx)?;
        acc = Some(match acc {
            Some(a) => g.add(a, rows)?,
            None => rows,
        });
    }
    acc.ok_or_else(|| Error::contract("no positional axes"))
}

/// `proj(patch) + modality + positional` for every token, shape `[L, d_enc]`.
pub fn embed_encoder_tokens<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    patches: &PatchSet,
) -> Result<Var> {
    if patches.is_empty() {
        return Err(Error::contract("cannot embed an empty token list"));
    }
    let m = patches.coords.modality;
    let key = modality_key(m);
    let x = g.input(patch_tensor(patches)?);
    let w = g.param(store, &format!("embed.{key}.proj.weight"))?;
    let b = g.param(store, &format!("embed.{key}.proj.bias"))?;
    let proj = g.matmul(x, w)?;
    let proj = g.add(proj, b)?;
    let modality = lookup(g, store, "embed.modality", &vec![m.index(); patches.len()])?;
    let pos = positional(g, store, "embed", &patches.coords)?;
    let e = g.add(proj, modality)?;
    g.add(e, pos)
}

/// Decoder input for one modality: visible hidden states (`[|visible|, d_dec]`,
/// already projected to decoder width) placed at their grid positions, the
/// `[MASK]` vector everywhere else, plus decoder positional tables.
pub fn embed_decoder_tokens<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    visible: Var,
    mask: &ModalityMask,
    coords: &PatchCoords,
) -> Result<Var> {
    let full = coords.len();
    if mask.len() != full {
        return Err(Error::contract(format!(
            "mask plan covers {} tokens, modality has {full}",
            mask.len()
        )));
    }
    let rows = g.shape(visible)[0];
    if rows != mask.visible.len() {
        return Err(Error::contract(format!(
            "hidden slice has {rows} rows, plan has {} visible tokens",
            mask.visible.len()
        )));
    }
    let d = g.shape(visible)[1];
    let mask_vec = g.param(store, "decoder.mask")?;
    let mask_row = g.reshape(mask_vec, &[1, d])?;
    let pool = g.concat(&[visible, mask_row])?;
    let mut src = vec![rows; full];
    for (r, &pos) in mask.visible.iter().enumerate() {
        src[pos] = r;
    }
    let scattered = g.gather(pool, &src)?;
    let pos = positional(g, store, "decoder.embed", coords)?;
    g.add(scattered, pos)
}
