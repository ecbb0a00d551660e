use serde::{Deserialize, Serialize};

use super::eval::{recall_at_k, sign_accuracy, Metrics};
use super::prep::Prepared;
use super::pretrain::{pair_accuracy, pair_matrix, sample_batch};
use crate::error::{Error, Result};
use crate::model::{encode, init_task_head, task_head_forward, task_head_logits, Checkpoint, HeadKind};
use crate::numerics::{cosine_lr, AdamHyper, AdamState, Float, Graph, ParamStore, Tensor, Var};
use crate::objectives::{make_vam_batch, vam_loss_logits};
use crate::rng;

/// Supervision for a task head, one entry per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "kebab-case")]
pub enum TaskTargets {
    /// Sample `i`'s audio matches sample `i`'s frames.
    Pairs,
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl TaskTargets {
    /// Targets the synthetic labels supply for `kind`.
    pub fn from_labels(kind: &HeadKind, data: &[Prepared]) -> Self {
        match kind {
            HeadKind::Matching => TaskTargets::Pairs,
            HeadKind::MultiLabel { .. } => TaskTargets::Classes(data.iter().map(|s| s.label.class).collect()),
            HeadKind::Regression => TaskTargets::Values(data.iter().map(|s| s.label.value).collect()),
        }
    }

    pub fn check(&self, kind: &HeadKind, n: usize) -> Result<()> {
        let len = match (kind, self) {
            (HeadKind::Matching, TaskTargets::Pairs) => n,
            (HeadKind::MultiLabel { classes }, TaskTargets::Classes(c)) => {
                if let Some(bad) = c.iter().find(|&&c| c >= *classes) {
                    return Err(Error::config(format!("class {bad} outside a {classes}-way head")));
                }
                c.len()
            }
            (HeadKind::Regression, TaskTargets::Values(v)) => v.len(),
            _ => return Err(Error::config(format!("targets do not fit a `{kind}` head"))),
        };
        if len != n {
            return Err(Error::config(format!("{len} targets for {n} samples")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOptions {
    pub head: HeadKind,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hyper: AdamHyper,
    pub warmup_steps: usize,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            head: HeadKind::Matching,
            steps: 100,
            batch_size: 8,
            seed: 0,
            hyper: AdamHyper {
                lr: 1e-3,
                ..AdamHyper::default()
            },
            warmup_steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<FinetuneReport>,
}

fn cls_of<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    ckpt: &Checkpoint,
    vision: &Prepared,
    audio: &Prepared,
) -> Result<Var> {
    let e = encode(g, store, &ckpt.config, Some(&vision.vision), Some(&audio.audio))?;
    e.cls(g)
}

/// Head loss over one batch: binary cross-entropy for matching and
/// multi-label heads, squared error for regression.
#[allow(clippy::too_many_arguments)]
pub fn head_loss<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    ckpt: &Checkpoint,
    kind: &HeadKind,
    data: &[Prepared],
    targets: &TaskTargets,
    batch: &[usize],
    pair_seed: u64,
) -> Result<Var> {
    let mut logits = Vec::with_capacity(batch.len());
    let mut y = Vec::new();
    match (kind, targets) {
        (HeadKind::Matching, TaskTargets::Pairs) => {
            let pairs = make_vam_batch(batch.len(), &mut rng::stream(pair_seed, &[]))?;
            for item in &pairs.items {
                let cls = cls_of(g, store, ckpt, &data[batch[item.vision_index()]], &data[batch[item.index]])?;
                logits.push(task_head_logits(g, store, cls)?);
            }
            y = pairs.labels();
        }
        (HeadKind::MultiLabel { classes }, TaskTargets::Classes(c)) => {
            for &i in batch {
                let cls = cls_of(g, store, ckpt, &data[i], &data[i])?;
                logits.push(task_head_logits(g, store, cls)?);
                y.extend((0..*classes).map(|k| if k == c[i] { 1.0 } else { 0.0 }));
            }
        }
        (HeadKind::Regression, TaskTargets::Values(v)) => {
            for &i in batch {
                let cls = cls_of(g, store, ckpt, &data[i], &data[i])?;
                logits.push(task_head_logits(g, store, cls)?);
                y.push(v[i]);
            }
            let z = g.concat(&logits)?;
            let z = g.reshape(z, &[batch.len()])?;
            let t = g.input(Tensor::from_f64(&[batch.len()], &y)?);
            let d = g.sub(z, t)?;
            let sq = g.mul(d, d)?;
            return g.mean(sq);
        }
        _ => return Err(Error::config(format!("targets do not fit a `{kind}` head"))),
    }
    let z = g.concat(&logits)?;
    vam_loss_logits(g, z, &y, false)
}

/// Attaches a fresh head of `opts.head` and trains it jointly with the
/// encoder.
pub fn finetune(
    ckpt: &Checkpoint,
    data: &[Prepared],
    targets: &TaskTargets,
    opts: &FinetuneOptions,
    mut on_step: impl FnMut(&FinetuneReport),
) -> Result<FinetuneOutcome> {
    targets.check(&opts.head, data.len())?;
    let mut ckpt = ckpt.clone();
    init_task_head(&mut ckpt.params, ckpt.config.d_enc, &opts.head, rng::derive_seed(opts.seed, &[0x6865_6164]))?;
    ckpt.head = Some(opts.head);
    ckpt.optimizer = None;
    let mut adam = AdamState::<f32>::new(opts.hyper);
    let mut log = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let lr = cosine_lr(step, opts.steps, opts.hyper.lr, opts.warmup_steps)?;
        let batch = sample_batch(data.len(), opts.batch_size, opts.seed, step)?;
        let mut g = Graph::<f32>::new();
        let pair_seed = rng::derive_seed(opts.seed, &[0x6674, step as u64]);
        let loss = head_loss(&mut g, &ckpt.params, &ckpt, &opts.head, data, targets, &batch, pair_seed)?;
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NanLoss { step, lr });
        }
        g.backward(loss)?;
        adam.update_with_lr(&mut ckpt.params, &g.param_grads(), lr)?;
        let report = FinetuneReport { step, lr, loss: value };
        on_step(&report);
        log.push(report);
    }
    ckpt.optimizer = Some(adam);
    Ok(FinetuneOutcome { checkpoint: ckpt, log })
}

fn head_kind(ckpt: &Checkpoint) -> Result<HeadKind> {
    ckpt.head.ok_or_else(|| Error::config("checkpoint has no task head"))
}

/// Head output for the (vision of `v`, audio of `a`) pair.
pub fn head_scores(ckpt: &Checkpoint, v: &Prepared, a: &Prepared) -> Result<Vec<f64>> {
    let kind = head_kind(ckpt)?;
    let mut g = Graph::<f32>::new();
    let cls = cls_of(&mut g, &ckpt.params, ckpt, v, a)?;
    let out = task_head_forward(&mut g, &ckpt.params, cls, &kind)?;
    Ok(g.value(out).to_f64_vec())
}

/// Audio-to-vision retrieval with the matching head over all pairs.
pub fn evaluate_retrieval(ckpt: &Checkpoint, data: &[Prepared], ks: &[usize]) -> Result<Metrics> {
    if head_kind(ckpt)? != HeadKind::Matching {
        return Err(Error::config("retrieval needs a matching head"));
    }
    let scores = pair_matrix(data, |vision, audio| {
        let mut g = Graph::<f32>::new();
        let e = encode(&mut g, &ckpt.params, &ckpt.config, Some(vision), Some(audio))?;
        let cls = e.cls(&mut g)?;
        let out = task_head_forward(&mut g, &ckpt.params, cls, &HeadKind::Matching)?;
        Ok(g.value(out).item().as_f64())
    })?;
    let logits: Vec<Vec<f64>> = scores
        .iter()
        .map(|r| r.iter().map(|&p| if p > 0.5 { 1.0 } else { -1.0 }).collect())
        .collect();
    Ok(Metrics {
        task: "retrieval".into(),
        recall: recall_at_k(&scores, ks)?,
        accuracy: Some(pair_accuracy(&logits)),
        ..Metrics::default()
    })
}

/// Metrics of the checkpoint's head on `data`.
pub fn evaluate_head(ckpt: &Checkpoint, data: &[Prepared], targets: &TaskTargets) -> Result<Metrics> {
    let kind = head_kind(ckpt)?;
    targets.check(&kind, data.len())?;
    match (&kind, targets) {
        (HeadKind::Matching, _) => evaluate_retrieval(ckpt, data, &[1, 5, 10]),
        (HeadKind::MultiLabel { .. }, TaskTargets::Classes(c)) => {
            let mut hits = 0;
            for (s, &cls) in data.iter().zip(c) {
                let p = head_scores(ckpt, s, s)?;
                let arg = super::eval::rank_candidates(&p)[0];
                hits += usize::from(arg == cls);
            }
            Ok(Metrics {
                task: "classification".into(),
                accuracy: Some(hits as f64 / data.len() as f64),
                ..Metrics::default()
            })
        }
        (HeadKind::Regression, TaskTargets::Values(v)) => {
            let pred: Vec<f64> = data
                .iter()
                .map(|s| head_scores(ckpt, s, s).map(|p| p[0]))
                .collect::<Result<_>>()?;
            let mse = pred.iter().zip(v).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / data.len() as f64;
            Ok(Metrics {
                task: "regression".into(),
                a2: Some(sign_accuracy(&pred, v)),
                mse: Some(mse),
                ..Metrics::default()
            })
        }
        _ => Err(Error::config(format!("targets do not fit a `{kind}` head"))),
    }
}
