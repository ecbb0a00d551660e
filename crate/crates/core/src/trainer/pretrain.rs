use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::prep::Prepared;
use crate::error::{Error, Result};
use crate::model::{encode, init_params, reconstruct, vam_logit, Checkpoint, ModelConfig};
use crate::numerics::{cosine_lr, AdamHyper, AdamState, Float, Graph, ParamStore, Tensor, Var};
use crate::objectives::{
    combined, make_vam_batch, mae_loss, normalize_patch_targets, vam_loss_logits, LossReport, LossWeights, MaeNorm, PairBatch,
};
use crate::rng;
use crate::tokenizer::{patch_tensor, sample_mask_plan, MaskOptions, MaskPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Vam,
    Mae,
    Both,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vam" => Ok(Objective::Vam),
            "mae" => Ok(Objective::Mae),
            "both" => Ok(Objective::Both),
            _ => Err(Error::config(format!("unknown objective `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub objective: Objective,
    pub weights: LossWeights,
    pub hyper: AdamHyper,
    pub warmup_steps: usize,
    pub mask: MaskOptions,
    /// Use the positive-only `−y·log p` matching loss.
    pub literal_vam: bool,
    pub mae_norm: MaeNorm,
    /// Renormalize each target patch to zero mean, unit variance.
    #[serde(default)]
    pub norm_targets: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            seed: 0,
            objective: Objective::Both,
            weights: LossWeights::default(),
            hyper: AdamHyper {
                lr: 1e-3,
                ..AdamHyper::default()
            },
            warmup_steps: 0,
            mask: MaskOptions::default(),
            literal_vam: false,
            mae_norm: MaeNorm::Sum,
            norm_targets: false,
        }
    }
}

impl TrainOptions {
    pub fn uses_vam(&self) -> bool {
        self.objective != Objective::Mae && self.weights.vam != 0.0
    }

    pub fn uses_mae(&self) -> bool {
        self.objective != Objective::Vam && self.weights.mae != 0.0
    }
}

/// Graph handles and bookkeeping for one training step.
#[derive(Clone, Debug)]
pub struct StepGraph {
    pub loss: Var,
    pub vam: Option<Var>,
    pub logits: Option<Var>,
    pub mae: Option<Var>,
    pub mae_vision: Option<Var>,
    pub mae_audio: Option<Var>,
    /// Encoder sequence lengths of the matching pass (full sequences).
    pub vam_seq_lens: Vec<usize>,
    /// Encoder sequence lengths of the reconstruction pass (visible subsets).
    pub mae_seq_lens: Vec<usize>,
    pub masked_vision: usize,
    pub masked_audio: usize,
}

/// Builds both passes of one step on `g`: matching over full sequences of
/// `pairs`, reconstruction over the visible subsets given by `plans`.
#[allow(clippy::too_many_arguments)]
pub fn build_step<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    data: &[Prepared],
    batch: &[usize],
    pairs: Option<&PairBatch>,
    plans: Option<&[MaskPlan]>,
    opts: &TrainOptions,
) -> Result<StepGraph> {
    let mut out = StepParts {
        vam: None,
        logits: None,
        mae: None,
        mae_vision: None,
        mae_audio: None,
        vam_seq_lens: Vec::new(),
        mae_seq_lens: Vec::new(),
        masked_vision: 0,
        masked_audio: 0,
    };
    if let Some(pairs) = pairs {
        let mut logits = Vec::with_capacity(pairs.items.len());
        for item in &pairs.items {
            let audio = &data[batch[item.index]].audio;
            let vision = &data[batch[item.vision_index()]].vision;
            let e = encode(g, store, cfg, Some(vision), Some(audio))?;
            out.vam_seq_lens.push(e.len());
            let cls = e.cls(g)?;
            logits.push(vam_logit(g, store, cls)?);
        }
        let z = g.concat(&logits)?;
        out.vam = Some(vam_loss_logits(g, z, &pairs.labels(), opts.literal_vam)?);
        out.logits = Some(z);
    }
    if let Some(plans) = plans {
        let mut per_sample = Vec::with_capacity(batch.len());
        let (mut sum_v, mut sum_a) = (Vec::new(), Vec::new());
        for (&idx, plan) in batch.iter().zip(plans) {
            let s = &data[idx];
            let r = reconstruct(g, store, cfg, &s.vision, &s.audio, plan)?;
            out.mae_seq_lens.push(r.encoder_len);
            let (rv, ra) = (r.vision, r.audio);
            let mut tv: Tensor<T> = patch_tensor(&s.vision)?;
            let mut ta: Tensor<T> = patch_tensor(&s.audio)?;
            if opts.norm_targets {
                tv = normalize_patch_targets(&tv)?;
                ta = normalize_patch_targets(&ta)?;
            }
            let terms = mae_loss(g, rv, &tv, &plan.vision.masked, ra, &ta, &plan.audio.masked, opts.mae_norm)?;
            per_sample.push(terms.total);
            sum_v.push(terms.vision);
            sum_a.push(terms.audio);
            out.masked_vision += plan.vision.masked.len();
            out.masked_audio += plan.audio.masked.len();
        }
        let mean = |g: &mut Graph<T>, vars: &[Var]| -> Result<Var> {
            let parts: Vec<Var> = vars
                .iter()
                .map(|&v| g.reshape(v, &[1]))
                .collect::<Result<_>>()?;
            let cat = g.concat(&parts)?;
            g.mean(cat)
        };
        out.mae = Some(mean(g, &per_sample)?);
        out.mae_vision = Some(mean(g, &sum_v)?);
        out.mae_audio = Some(mean(g, &sum_a)?);
    }
    let loss = combined(g, out.vam, out.mae, opts.weights)?;
    Ok(StepGraph {
        loss,
        vam: out.vam,
        logits: out.logits,
        mae: out.mae,
        mae_vision: out.mae_vision,
        mae_audio: out.mae_audio,
        vam_seq_lens: out.vam_seq_lens,
        mae_seq_lens: out.mae_seq_lens,
        masked_vision: out.masked_vision,
        masked_audio: out.masked_audio,
    })
}

struct StepParts {
    vam: Option<Var>,
    logits: Option<Var>,
    mae: Option<Var>,
    mae_vision: Option<Var>,
    mae_audio: Option<Var>,
    vam_seq_lens: Vec<usize>,
    mae_seq_lens: Vec<usize>,
    masked_vision: usize,
    masked_audio: usize,
}

fn scalar<T: Float>(g: &Graph<T>, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| g.value(v).item().as_f64())
}

/// Chooses `min(batch_size, n)` distinct items for a step.
pub fn sample_batch(n: usize, batch_size: usize, seed: u64, step: usize) -> Result<Vec<usize>> {
    let b = batch_size.min(n);
    if b < 2 {
        return Err(Error::BatchSize(b));
    }
    if b == n {
        return Ok((0..n).collect());
    }
    let mut idx = sample(&mut rng::stream(seed, &[0x6261_7463, step as u64]), n, b).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Matching pairs and mask plans for a step, all drawn from streams keyed by
/// (seed, step) so runs are reproducible.
pub fn step_inputs(
    data: &[Prepared],
    batch: &[usize],
    opts: &TrainOptions,
    step: usize,
) -> Result<(Option<PairBatch>, Option<Vec<MaskPlan>>)> {
    let pairs = if opts.uses_vam() {
        Some(make_vam_batch(batch.len(), &mut rng::stream(opts.seed, &[0x7661_6d, step as u64]))?)
    } else {
        None
    };
    let plans = if opts.uses_mae() {
        Some(
            batch
                .iter()
                .map(|&i| {
                    let s = &data[i];
                    let seed = rng::derive_seed(opts.seed, &[0x6d61_65, step as u64, i as u64]);
                    sample_mask_plan(&s.vision.coords, &s.audio.coords, &opts.mask, Some(&s.spans), seed)
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok((pairs, plans))
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossReport>,
}

/// The untrained model [`pretrain`] starts from.
pub fn initial_checkpoint(cfg: &ModelConfig, opts: &TrainOptions) -> Result<Checkpoint> {
    Ok(Checkpoint {
        config: cfg.clone(),
        params: init_params::<f32>(cfg, rng::derive_seed(opts.seed, &[0x696e_6974]))?,
        head: None,
        global_step: 0,
        optimizer: None,
    })
}

/// Initializes a model from `opts.seed` and pretrains it.
pub fn pretrain(
    cfg: &ModelConfig,
    data: &[Prepared],
    opts: &TrainOptions,
    on_step: impl FnMut(&LossReport),
) -> Result<PretrainOutcome> {
    continue_pretraining(initial_checkpoint(cfg, opts)?, data, opts, on_step)
}

/// Runs `opts.steps` further steps from an existing checkpoint.
pub fn continue_pretraining(
    mut ckpt: Checkpoint,
    data: &[Prepared],
    opts: &TrainOptions,
    mut on_step: impl FnMut(&LossReport),
) -> Result<PretrainOutcome> {
    if data.is_empty() {
        return Err(Error::contract("pretraining needs a non-empty dataset"));
    }
    if !opts.uses_vam() && !opts.uses_mae() {
        return Err(Error::config("both loss weights are zero"));
    }
    let cfg = ckpt.config.clone();
    let mut adam = ckpt.optimizer.take().unwrap_or_else(|| AdamState::new(opts.hyper));
    adam.hyper = opts.hyper;
    let mut log = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let lr = cosine_lr(step, opts.steps, opts.hyper.lr, opts.warmup_steps)?;
        let batch = sample_batch(data.len(), opts.batch_size, opts.seed, step)?;
        let (pairs, plans) = step_inputs(data, &batch, opts, step)?;
        let mut g = Graph::<f32>::new();
        let sg = build_step(&mut g, &ckpt.params, &cfg, data, &batch, pairs.as_ref(), plans.as_deref(), opts)?;
        let loss = g.value(sg.loss).item().as_f64();
        if !loss.is_finite() {
            return Err(Error::NanLoss { step, lr });
        }
        g.backward(sg.loss)?;
        adam.update_with_lr(&mut ckpt.params, &g.param_grads(), lr)?;
        let vam_batch_accuracy = match (&pairs, sg.logits) {
            (Some(p), Some(z)) => {
                let z = g.value(z).data();
                let hits = p
                    .items
                    .iter()
                    .zip(z)
                    .filter(|(it, &z)| (z.as_f64() > 0.0) == (it.label() == 1.0))
                    .count();
                hits as f64 / p.items.len() as f64
            }
            _ => 0.0,
        };
        let report = LossReport {
            step: ckpt.global_step as usize + step,
            lr,
            vam: scalar(&g, sg.vam),
            mae: scalar(&g, sg.mae),
            mae_vision: scalar(&g, sg.mae_vision),
            mae_audio: scalar(&g, sg.mae_audio),
            combined: loss,
            masked_vision: sg.masked_vision,
            masked_audio: sg.masked_audio,
            vam_batch_accuracy,
        };
        on_step(&report);
        log.push(report);
    }
    ckpt.global_step += opts.steps as u64;
    ckpt.optimizer = Some(adam);
    Ok(PretrainOutcome { checkpoint: ckpt, log })
}

/// Matching logits for every (audio query, vision candidate) pair.
pub fn vam_logit_matrix(ckpt: &Checkpoint, data: &[Prepared]) -> Result<Vec<Vec<f64>>> {
    pair_matrix(data, |vision, audio| {
        let mut g = Graph::<f32>::new();
        let e = encode(&mut g, &ckpt.params, &ckpt.config, Some(vision), Some(audio))?;
        let cls = e.cls(&mut g)?;
        let z = vam_logit(&mut g, &ckpt.params, cls)?;
        Ok(g.value(z).item().as_f64())
    })
}

pub(crate) fn pair_matrix(
    data: &[Prepared],
    mut score: impl FnMut(&crate::tokenizer::PatchSet, &crate::tokenizer::PatchSet) -> Result<f64>,
) -> Result<Vec<Vec<f64>>> {
    data.iter()
        .map(|q| data.iter().map(|c| score(&c.vision, &q.audio)).collect())
        .collect()
}

/// Balanced accuracy over all `n²` pairs: the mean of the matched-pair and
/// mismatched-pair hit rates (logit > 0 ⇔ matched). A constant scorer gets 0.5.
pub fn pair_accuracy(logits: &[Vec<f64>]) -> f64 {
    let n = logits.len();
    if n == 0 {
        return 0.0;
    }
    let (mut pos, mut neg) = (0usize, 0usize);
    for (i, row) in logits.iter().enumerate() {
        for (j, &z) in row.iter().enumerate() {
            match (i == j, z > 0.0) {
                (true, true) => pos += 1,
                (false, false) => neg += 1,
                _ => {}
            }
        }
    }
    let pos_rate = pos as f64 / n as f64;
    if n == 1 {
        return pos_rate;
    }
    0.5 * (pos_rate + neg as f64 / (n * (n - 1)) as f64)
}

/// Mean reconstruction loss over `rounds` fixed mask draws per sample; the
/// draws depend only on `seed`, so two checkpoints see identical masks.
pub fn evaluate_mae(ckpt: &Checkpoint, data: &[Prepared], opts: &TrainOptions, rounds: usize) -> Result<f64> {
    if data.is_empty() || rounds == 0 {
        return Err(Error::contract("MAE evaluation needs samples and at least one round"));
    }
    let mut eval = opts.clone();
    eval.objective = Objective::Mae;
    eval.weights = LossWeights { vam: 0.0, mae: 1.0 };
    let batch: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for round in 0..rounds {
        let plans = batch
            .iter()
            .map(|&i| {
                let s = &data[i];
                let seed = rng::derive_seed(opts.seed, &[0x6576_616c, round as u64, i as u64]);
                sample_mask_plan(&s.vision.coords, &s.audio.coords, &opts.mask, Some(&s.spans), seed)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::<f32>::new();
        let sg = build_step(&mut g, &ckpt.params, &ckpt.config, data, &batch, None, Some(&plans), &eval)?;
        total += scalar(&g, sg.mae);
    }
    Ok(total / rounds as f64)
}
