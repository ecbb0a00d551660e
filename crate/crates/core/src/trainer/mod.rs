//! Synthetic data, pretraining and finetuning loops, evaluation and latency
//! benchmarks.

mod bench;
mod data;
mod eval;
mod finetune;
mod prep;
mod pretrain;

pub use bench::{bench_latency, default_cases, BenchCase, CaseReport, LatencyReport, StageStats, Stages};
pub use data::*;
pub use eval::{rank_candidates, rank_of, recall_at_k, sign_accuracy, Metrics};
pub use finetune::{
    evaluate_head, evaluate_retrieval, finetune, head_loss, head_scores, FinetuneOptions, FinetuneOutcome,
    FinetuneReport, TaskTargets,
};
pub use prep::{model_clip, prepare_dataset, prepare_sample, standardize_clip, standardize_spectrogram, Prepared};
pub use pretrain::{
    build_step, continue_pretraining, evaluate_mae, initial_checkpoint, pair_accuracy, pretrain, sample_batch, step_inputs, vam_logit_matrix,
    Objective, PretrainOutcome, StepGraph, TrainOptions,
};
