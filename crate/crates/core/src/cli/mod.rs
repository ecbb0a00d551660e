//! The `tvlt` command-line front end.
//!
//! Exit codes: 0 success, 1 verification failure or runtime error, 2 usage
//! or config error, 3 I/O error.

pub mod config;
pub mod render;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{decoder_attention_pairs, load_checkpoint, save_checkpoint, DecoderMode, EncoderMode, HeadKind, Preset};
use crate::numerics::{GradFault, OpKind};
use crate::rng;
use crate::selfcheck::{run_selfcheck, SelfcheckOptions};
use crate::tokenizer::{sample_mask_plan, AudioPatch};
use crate::trainer::{
    bench_latency, evaluate_head, evaluate_mae, finetune, generate_synthetic_dataset, initial_checkpoint, load_dataset,
    model_clip, pair_accuracy, prepare_dataset, prepare_sample, pretrain, vam_logit_matrix, write_dataset, Dataset,
    Objective, TaskTargets,
};
pub use config::{resolve, Overrides, RunConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.tvlt";
/// Fixed-mask rounds behind the reported reconstruction losses.
pub const MAE_EVAL_ROUNDS: usize = 4;

#[derive(Parser, Debug)]
#[command(name = "tvlt", version, about = "Textless vision-language transformer at desk scale")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// JSON file merged over the preset defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Training steps for pretrain and finetune.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true, value_parser = parse_with::<Preset>)]
    pub preset: Option<Preset>,
    #[arg(long, global = true, value_parser = parse_with::<Objective>)]
    pub objective: Option<Objective>,
    /// `16x16` or `2x128`.
    #[arg(long, global = true, value_parser = parse_with::<AudioPatch>)]
    pub audio_patch: Option<AudioPatch>,
    #[arg(long, global = true, value_parser = parse_with::<DecoderMode>)]
    pub decoder: Option<DecoderMode>,
    #[arg(long, global = true, value_parser = parse_with::<EncoderMode>)]
    pub encoder: Option<EncoderMode>,
}

fn parse_with<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            preset: self.preset,
            seed: self.seed,
            steps: self.steps,
            objective: self.objective,
            audio_patch: self.audio_patch,
            decoder: self.decoder,
            encoder: self.encoder,
        }
    }
}

/// Where samples come from: a generated directory, or the config's synthetic
/// spec generated in memory.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_samples: Option<usize>,
        /// Replace a non-empty target directory.
        #[arg(long)]
        force: bool,
    },
    /// Pretrain with matching and/or masked reconstruction.
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach a task head and train it with the encoder.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Evaluation samples; defaults to the training set.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// `matching`, `regression` or `multi-label:<classes>`.
        #[arg(long, value_parser = parse_with::<HeadKind>)]
        head: Option<HeadKind>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: its task head if it has one, else the
    /// pretraining objectives.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time spectrogram extraction, tokenization and encoding.
    Bench {
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render masked input, reconstruction and target images for one sample.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Sample index within the dataset.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run gradient checks, oracle equivalences and invariant suites.
    Selfcheck {
        /// Directory for the JSON report; printed to stdout either way.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        instances: Option<usize>,
        /// Negate the backward rule of the named op.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

impl Cmd {
    pub fn name(&self) -> &'static str {
        match self {
            Cmd::GenData { .. } => "gen-data",
            Cmd::Pretrain { .. } => "pretrain",
            Cmd::Finetune { .. } => "finetune",
            Cmd::Eval { .. } => "eval",
            Cmd::Bench { .. } => "bench",
            Cmd::Reconstruct { .. } => "reconstruct",
            Cmd::Selfcheck { .. } => "selfcheck",
        }
    }
}

/// How a command that ran to completion ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    VerificationFailed,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn load_data(args: &DataArgs, cfg: &RunConfig) -> Result<Dataset> {
    match &args.data {
        Some(dir) => load_dataset(dir),
        None => generate_synthetic_dataset(&cfg.data),
    }
}

fn write_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct PretrainMetrics {
    task: &'static str,
    objective: Objective,
    steps: usize,
    /// Balanced accuracy of the matching logit over every audio/vision pair.
    vam_accuracy: f64,
    mae_initial: f64,
    mae_final: f64,
    /// Query-key pairs scored by decoder attention per training step,
    /// counted while training.
    decoder_attention_pairs_per_step: u64,
    loss_curve: Vec<f64>,
}

fn cmd_pretrain(cfg: &RunConfig, data: &DataArgs, out: &Path) -> Result<Outcome> {
    let ds = load_data(data, cfg)?;
    let prepared = prepare_dataset(&ds, &cfg.model)?;
    let init = initial_checkpoint(&cfg.model, &cfg.train)?;
    let mae_initial = evaluate_mae(&init, &prepared, &cfg.train, MAE_EVAL_ROUNDS)?;
    let pairs_before = decoder_attention_pairs();
    let outcome = pretrain(&cfg.model, &prepared, &cfg.train, |r| {
        if r.step % 50 == 0 || r.step + 1 == cfg.train.steps {
            eprintln!("step {:>4}  loss {:.5}  lr {:.2e}", r.step, r.combined, r.lr);
        }
    })?;
    let pairs = (decoder_attention_pairs() - pairs_before) / cfg.train.steps.max(1) as u64;
    std::fs::create_dir_all(out)?;
    save_checkpoint(&outcome.checkpoint, &out.join(CHECKPOINT_FILE))?;
    write_lines(&out.join("loss.jsonl"), &outcome.log)?;
    let ckpt = &outcome.checkpoint;
    let metrics = PretrainMetrics {
        task: "pretrain",
        objective: cfg.train.objective,
        steps: cfg.train.steps,
        vam_accuracy: pair_accuracy(&vam_logit_matrix(ckpt, &prepared)?),
        mae_initial,
        mae_final: evaluate_mae(ckpt, &prepared, &cfg.train, MAE_EVAL_ROUNDS)?,
        decoder_attention_pairs_per_step: pairs,
        loss_curve: outcome.log.iter().map(|r| r.combined).collect(),
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    eprintln!(
        "vam accuracy {:.3}  mae {:.4} -> {:.4}",
        metrics.vam_accuracy, metrics.mae_initial, metrics.mae_final
    );
    Ok(Outcome::Success)
}

fn cmd_finetune(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &DataArgs,
    eval_data: Option<&Path>,
    head: Option<HeadKind>,
    out: &Path,
) -> Result<Outcome> {
    let ckpt = load_checkpoint(checkpoint, None)?;
    let ds = load_data(data, cfg)?;
    let prepared = prepare_dataset(&ds, &ckpt.config)?;
    let mut opts = cfg.finetune.clone();
    if let Some(h) = head {
        opts.head = h;
    }
    let targets = TaskTargets::from_labels(&opts.head, &prepared);
    let outcome = finetune(&ckpt, &prepared, &targets, &opts, |r| {
        if r.step % 50 == 0 || r.step + 1 == opts.steps {
            eprintln!("step {:>4}  loss {:.5}  lr {:.2e}", r.step, r.loss, r.lr);
        }
    })?;
    std::fs::create_dir_all(out)?;
    save_checkpoint(&outcome.checkpoint, &out.join(CHECKPOINT_FILE))?;
    write_lines(&out.join("loss.jsonl"), &outcome.log)?;
    let (eval_set, eval_targets) = match eval_data {
        Some(dir) => {
            let p = prepare_dataset(&load_dataset(dir)?, &ckpt.config)?;
            let t = TaskTargets::from_labels(&opts.head, &p);
            (p, t)
        }
        None => (prepared, targets),
    };
    let mut metrics = evaluate_head(&outcome.checkpoint, &eval_set, &eval_targets)?;
    metrics.loss_curve = outcome.log.iter().map(|r| r.loss).collect();
    write_json(&out.join("metrics.json"), &metrics)?;
    eprintln!("{}", serde_json::to_string(&metrics)?);
    Ok(Outcome::Success)
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: &DataArgs, out: &Path) -> Result<Outcome> {
    let ckpt = load_checkpoint(checkpoint, None)?;
    let prepared = prepare_dataset(&load_data(data, cfg)?, &ckpt.config)?;
    std::fs::create_dir_all(out)?;
    match ckpt.head {
        Some(kind) => {
            let m = evaluate_head(&ckpt, &prepared, &TaskTargets::from_labels(&kind, &prepared))?;
            write_json(&out.join("metrics.json"), &m)?;
            println!("{}", serde_json::to_string(&m)?);
        }
        None => {
            let m = serde_json::json!({
                "task": "pretrain",
                "vam_accuracy": pair_accuracy(&vam_logit_matrix(&ckpt, &prepared)?),
                "mae": evaluate_mae(&ckpt, &prepared, &cfg.train, MAE_EVAL_ROUNDS)?,
            });
            write_json(&out.join("metrics.json"), &m)?;
            println!("{m}");
        }
    }
    Ok(Outcome::Success)
}

fn cmd_bench(cfg: &RunConfig, runs: Option<usize>, out: &Path) -> Result<Outcome> {
    let runs = runs.unwrap_or(cfg.bench.runs);
    let report = bench_latency(&cfg.model, &cfg.spectrogram, &cfg.bench.cases, runs, cfg.seed)?;
    std::fs::create_dir_all(out)?;
    write_json(&out.join("latency.json"), &report)?;
    println!("{:>8} {:>7} {:>7} {:>7} {:>12} {:>12} {:>12}", "audio_s", "frames", "Lv", "La", "fft_ms", "tokenize_ms", "encode_ms");
    for c in &report.cases {
        println!(
            "{:>8.1} {:>7} {:>7} {:>7} {:>12.3} {:>12.3} {:>12.3}",
            c.case.audio_seconds,
            c.case.frames,
            c.vision_tokens,
            c.audio_tokens,
            c.stages.fft.median_ms,
            c.stages.tokenize.median_ms,
            c.stages.encode.median_ms
        );
    }
    Ok(Outcome::Success)
}

fn cmd_reconstruct(cfg: &RunConfig, checkpoint: &Path, data: &DataArgs, index: usize, out: &Path) -> Result<Outcome> {
    let ckpt = load_checkpoint(checkpoint, None)?;
    let ds = load_data(data, cfg)?;
    let sample = ds
        .samples
        .get(index)
        .ok_or_else(|| Error::config(format!("sample {index} out of range for {} samples", ds.len())))?;
    let prepared = prepare_sample(sample, &ckpt.config, &ds.manifest.spectrogram, &ds.manifest.stats)?;
    let seed = rng::derive_seed(cfg.seed, &[0x7265_636f, index as u64]);
    let plan = sample_mask_plan(
        &prepared.vision.coords,
        &prepared.audio.coords,
        &cfg.train.mask,
        Some(&prepared.spans),
        seed,
    )?;
    let clip = model_clip(sample, &ckpt.config)?;
    let record = render::render_reconstruction(&ckpt, &prepared, &clip, &ds.manifest.stats, &plan, out)?;
    for p in render::image_paths(&record, out) {
        println!("{}", p.display());
    }
    Ok(Outcome::Success)
}

fn cmd_selfcheck(cfg: &RunConfig, out: Option<&Path>, instances: Option<usize>, fault: Option<&str>) -> Result<Outcome> {
    let fault = match fault {
        Some(name) => Some(GradFault {
            op: OpKind::from_name(name).ok_or_else(|| Error::config(format!("unknown op `{name}`")))?,
        }),
        None => None,
    };
    let mut opts = SelfcheckOptions {
        seed: cfg.seed,
        fault,
        ..SelfcheckOptions::default()
    };
    if let Some(n) = instances {
        opts.instances = n;
    }
    let report = run_selfcheck(&opts);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("selfcheck.json"), &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    for c in report.failures() {
        eprintln!(
            "FAIL {}::{} magnitude {:e} > {:e} {}",
            c.module, c.op, c.magnitude, c.threshold, c.detail
        );
    }
    let n = report.checks.len();
    let failed = report.failures().count();
    eprintln!("{} of {n} checks passed", n - failed);
    Ok(if report.pass { Outcome::Success } else { Outcome::VerificationFailed })
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = resolve(cli.global.config.as_deref(), &cli.global.overrides())?;
    let name = cli.command.name();
    match &cli.command {
        Cmd::GenData { out, n_samples, force } => {
            let mut spec = cfg.data.clone();
            if let Some(n) = n_samples {
                spec.n_samples = *n;
            }
            let ds = generate_synthetic_dataset(&spec)?;
            write_dataset(&ds, out, *force)?;
            let mut cfg = cfg;
            cfg.data = spec;
            config::write_run_files(out, name, &cfg)?;
            eprintln!("wrote {} samples to {}", ds.len(), out.display());
            Ok(Outcome::Success)
        }
        Cmd::Pretrain { data, out } => {
            config::write_run_files(out, name, &cfg)?;
            cmd_pretrain(&cfg, data, out)
        }
        Cmd::Finetune {
            checkpoint,
            data,
            eval_data,
            head,
            out,
        } => {
            config::write_run_files(out, name, &cfg)?;
            cmd_finetune(&cfg, checkpoint, data, eval_data.as_deref(), *head, out)
        }
        Cmd::Eval { checkpoint, data, out } => {
            config::write_run_files(out, name, &cfg)?;
            cmd_eval(&cfg, checkpoint, data, out)
        }
        Cmd::Bench { runs, out } => {
            config::write_run_files(out, name, &cfg)?;
            cmd_bench(&cfg, *runs, out)
        }
        Cmd::Reconstruct {
            checkpoint,
            data,
            sample,
            out,
        } => {
            config::write_run_files(out, name, &cfg)?;
            cmd_reconstruct(&cfg, checkpoint, data, *sample, out)
        }
        Cmd::Selfcheck {
            out,
            instances,
            inject_fault,
        } => {
            if let Some(dir) = out {
                config::write_run_files(dir, name, &cfg)?;
            }
            cmd_selfcheck(&cfg, out.as_deref(), *instances, inject_fault.as_deref())
        }
    }
}

/// Parses `args`, runs the command and maps the result to an exit code.
pub fn main_with_args<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::VerificationFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
