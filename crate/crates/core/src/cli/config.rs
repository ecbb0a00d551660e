use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::audio::SpectrogramConfig;
use crate::error::{Error, Result};
use crate::model::{DecoderMode, EncoderMode, ModelConfig, Preset};
use crate::tokenizer::AudioPatch;
use crate::trainer::{default_cases, BenchCase, FinetuneOptions, Objective, SyntheticSpec, TrainOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub runs: usize,
    pub cases: Vec<BenchCase>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            runs: 20,
            cases: default_cases(),
        }
    }
}

/// Everything a run depends on. The top-level `seed` is copied into every
/// section that takes one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub model: ModelConfig,
    /// Spectrogram settings for the latency benchmark; datasets carry their own.
    pub spectrogram: SpectrogramConfig,
    pub data: SyntheticSpec,
    pub train: TrainOptions,
    pub finetune: FinetuneOptions,
    pub bench: BenchOptions,
}

impl RunConfig {
    pub fn defaults(preset: Preset) -> Self {
        let model = preset.model();
        let spectrogram = preset.spectrogram();
        let data = SyntheticSpec {
            frame_size: model.image_size,
            frames: model.max_frames,
            sample_rate: spectrogram.sample_rate,
            ..SyntheticSpec::default()
        };
        Self {
            preset,
            seed: 0,
            model,
            spectrogram,
            data,
            train: TrainOptions::default(),
            finetune: FinetuneOptions::default(),
            bench: BenchOptions::default(),
        }
    }

    fn sync_seeds(&mut self) {
        self.data.seed = self.seed;
        self.train.seed = self.seed;
        self.finetune.seed = self.seed;
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }
}

/// Flag values that override the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub objective: Option<Objective>,
    pub audio_patch: Option<AudioPatch>,
    pub decoder: Option<DecoderMode>,
    pub encoder: Option<EncoderMode>,
}

/// Recursively merges `over` into `base`. Objects merge key by key, anything
/// else replaces. Keys absent from `base` are rejected so typos surface,
/// except inside tagged enums (objects with a `kind` field), which are
/// replaced whole.
pub fn merge(base: &mut Value, over: &Value, path: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) if !b.contains_key("kind") => {
            for (k, v) in o {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => return Err(Error::config(format!("unknown config key `{here}`"))),
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o.clone();
            Ok(())
        }
    }
}

/// Preset defaults, then the config file, then flags.
pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<RunConfig> {
    let user: Option<Value> = match file {
        Some(p) => Some(
            serde_json::from_slice(&std::fs::read(p)?)
                .map_err(|e| Error::config(format!("{}: {e}", p.display())))?,
        ),
        None => None,
    };
    let preset = match (flags.preset, user.as_ref().and_then(|u| u.get("preset"))) {
        (Some(p), _) => p,
        (None, Some(v)) => serde_json::from_value(v.clone()).map_err(|e| Error::config(format!("preset: {e}")))?,
        (None, None) => Preset::Desk,
    };
    let mut value = serde_json::to_value(RunConfig::defaults(preset))?;
    if let Some(u) = &user {
        if !u.is_object() {
            return Err(Error::config("config file must hold a JSON object"));
        }
        merge(&mut value, u, "")?;
    }
    let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))?;
    cfg.preset = preset;
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(n) = flags.steps {
        cfg.train.steps = n;
        cfg.finetune.steps = n;
    }
    if let Some(o) = flags.objective {
        cfg.train.objective = o;
    }
    if let Some(p) = flags.audio_patch {
        cfg.model = cfg.model.with_audio_patch(p);
    }
    if let Some(d) = flags.decoder {
        cfg.model.decoder = d;
    }
    if let Some(e) = flags.encoder {
        cfg.model.encoder = e;
    }
    cfg.sync_seeds();
    cfg.model.validate()?;
    cfg.spectrogram.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub git_rev: String,
    pub git_dirty: Option<bool>,
    pub config_sha256: String,
    pub seed: u64,
}

fn git(args: &[&str]) -> Option<String> {
    let out = Command::new("git").args(args).output().ok()?;
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

pub fn fingerprint(command: &str, cfg: &RunConfig) -> Result<Fingerprint> {
    let rev = git(&["rev-parse", "HEAD"]);
    let dirty = rev.as_ref().and_then(|_| git(&["status", "--porcelain"])).map(|s| !s.is_empty());
    Ok(Fingerprint {
        tool: "tvlt".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        git_rev: rev.unwrap_or_else(|| "unknown".into()),
        git_dirty: dirty,
        config_sha256: hex::encode(Sha256::digest(cfg.to_json()?)),
        seed: cfg.seed,
    })
}

/// Writes `config.resolved.json` and `fingerprint.json` into `dir`.
pub fn write_run_files(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.resolved.json"), cfg.to_json()?)?;
    let mut fp = serde_json::to_vec_pretty(&fingerprint(command, cfg)?)?;
    fp.push(b'\n');
    std::fs::write(dir.join("fingerprint.json"), fp)?;
    Ok(())
}
