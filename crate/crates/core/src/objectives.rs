//! Vision-audio matching and masked-autoencoding losses.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Float, Graph, Tensor, Var};

/// One entry of a matching batch. The audio side always comes from `index`;
/// the vision side from `replacement` when the pair is a negative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairItem {
    pub index: usize,
    pub replacement: Option<usize>,
}

impl PairItem {
    pub fn vision_index(&self) -> usize {
        self.replacement.unwrap_or(self.index)
    }

    pub fn label(&self) -> f64 {
        if self.replacement.is_none() {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairBatch {
    pub items: Vec<PairItem>,
}

impl PairBatch {
    pub fn labels(&self) -> Vec<f64> {
        self.items.iter().map(PairItem::label).collect()
    }

    pub fn negatives(&self) -> usize {
        self.items.iter().filter(|i| i.replacement.is_some()).count()
    }
}

/// Marks a uniformly chosen `floor(B/2)` items as negatives and gives each a
/// vision side drawn uniformly from the other items.
pub fn make_vam_batch(batch_size: usize, rng: &mut impl Rng) -> Result<PairBatch> {
    if batch_size < 2 {
        return Err(Error::BatchSize(batch_size));
    }
    let mut items: Vec<PairItem> = (0..batch_size)
        .map(|index| PairItem {
            index,
            replacement: None,
        })
        .collect();
    let mut negatives = sample(rng, batch_size, batch_size / 2).into_vec();
    negatives.sort_unstable();
    for i in negatives {
        let r = rng.random_range(0..batch_size - 1);
        items[i].replacement = Some(if r >= i { r + 1 } else { r });
    }
    Ok(PairBatch { items })
}

/// Mean binary cross-entropy over probabilities in `(0, 1)`.
pub fn vam_loss(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::shape(format!("{} probabilities for {} labels", p.len(), y.len())));
    }
    if let Some(bad) = p.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Numeric(format!("probability {bad} outside (0, 1)")));
    }
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
        .sum();
    Ok(total / p.len() as f64)
}

/// Matching loss from logits `[B, 1]`. The default is the full binary
/// cross-entropy `softplus(z) − y·z`; `literal` keeps only the positive term
/// `−y·log σ(z) = y·softplus(−z)`.
pub fn vam_loss_logits<T: Float>(g: &mut Graph<T>, logits: Var, labels: &[f64], literal: bool) -> Result<Var> {
    let n = g.value(logits).numel();
    if n != labels.len() || n == 0 {
        return Err(Error::shape(format!("{n} logits for {} labels", labels.len())));
    }
    let z = g.reshape(logits, &[n])?;
    let y = g.input(Tensor::from_f64(&[n], labels)?);
    let per_item = if literal {
        let neg = g.scale(z, T::of(-1.0));
        let sp = g.softplus(neg);
        g.mul(y, sp)?
    } else {
        let sp = g.softplus(z);
        let yz = g.mul(y, z)?;
        g.sub(sp, yz)?
    };
    g.mean(per_item)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaeNorm {
    /// Squared L2 over the whole patch vector.
    #[default]
    Sum,
    /// Squared L2 divided by the patch length.
    Mean,
}

/// `(1/N_M) Σ_{i ∈ masked} ‖x_i − x̂_i‖²` for one modality.
pub fn mae_term<T: Float>(
    g: &mut Graph<T>,
    recon: Var,
    target: &Tensor<T>,
    masked: &[usize],
    norm: MaeNorm,
) -> Result<Var> {
    if masked.is_empty() {
        return Err(Error::contract("MAE term over zero masked patches"));
    }
    if g.shape(recon) != target.shape() {
        return Err(Error::Dimension {
            op: "mae_loss",
            lhs: g.shape(recon).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let patch_dim = target.shape()[1];
    let r = g.gather(recon, masked)?;
    let t = g.input(target.gather_rows(masked)?);
    let diff = g.sub(r, t)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq);
    let denom = match norm {
        MaeNorm::Sum => masked.len(),
        MaeNorm::Mean => masked.len() * patch_dim,
    };
    Ok(g.scale(total, T::of(1.0 / denom as f64)))
}

/// Per-patch target renormalization: each row of `[L, D]` becomes
/// `(x − mean)/sqrt(var + 1e-6)`.
pub fn normalize_patch_targets<T: Float>(t: &Tensor<T>) -> Result<Tensor<T>> {
    if t.ndim() != 2 {
        return Err(Error::shape(format!("patch targets must be 2-D, got {:?}", t.shape())));
    }
    let d = t.shape()[1];
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d.max(1)) {
        let n = row.len() as f64;
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for v in row.iter_mut() {
            *v = T::of((v.as_f64() - mean) * inv);
        }
    }
    Ok(out)
}

/// Vision term, audio term and their sum.
#[derive(Clone, Copy, Debug)]
pub struct MaeTerms {
    pub total: Var,
    pub vision: Var,
    pub audio: Var,
}

#[allow(clippy::too_many_arguments)]
pub fn mae_loss<T: Float>(
    g: &mut Graph<T>,
    recon_v: Var,
    target_v: &Tensor<T>,
    masked_v: &[usize],
    recon_a: Var,
    target_a: &Tensor<T>,
    masked_a: &[usize],
    norm: MaeNorm,
) -> Result<MaeTerms> {
    let vision = mae_term(g, recon_v, target_v, masked_v, norm)?;
    let audio = mae_term(g, recon_a, target_a, masked_a, norm)?;
    let total = g.add(vision, audio)?;
    Ok(MaeTerms { total, vision, audio })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub vam: f64,
    pub mae: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { vam: 1.0, mae: 0.3 }
    }
}

pub fn combined_loss(vam: f64, mae: f64, w: LossWeights) -> f64 {
    w.vam * vam + w.mae * mae
}

/// `λ_vam·vam + λ_mae·mae` on the graph; absent terms contribute nothing.
pub fn combined<T: Float>(g: &mut Graph<T>, vam: Option<Var>, mae: Option<Var>, w: LossWeights) -> Result<Var> {
    let terms: Vec<Var> = [(vam, w.vam), (mae, w.mae)]
        .into_iter()
        .filter_map(|(v, l)| v.map(|v| (v, l)))
        .map(|(v, l)| g.scale(v, T::of(l)))
        .collect();
    match terms.as_slice() {
        [] => Err(Error::contract("combined loss with no objective")),
        [a] => Ok(*a),
        [a, b] => g.add(*a, *b),
        _ => unreachable!(),
    }
}

/// One JSON line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub lr: f64,
    pub vam: f64,
    pub mae: f64,
    pub mae_vision: f64,
    pub mae_audio: f64,
    pub combined: f64,
    /// Masked vision / audio patches summed over the batch.
    pub masked_vision: usize,
    pub masked_audio: usize,
    /// Fraction of matching-batch items classified correctly.
    pub vam_batch_accuracy: f64,
}
