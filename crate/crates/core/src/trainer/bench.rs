use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{log_mel_spectrogram, SpectrogramConfig, Waveform};
use crate::error::{Error, Result};
use crate::model::{encode, init_params, ModelConfig};
use crate::numerics::Graph;
use crate::rng;
use crate::tokenizer::{patchify_frames, patchify_spectrogram, VideoClip};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchCase {
    pub audio_seconds: f64,
    pub frames: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub median_ms: f64,
    /// Median absolute deviation.
    pub mad_ms: f64,
}

impl StageStats {
    pub fn from_samples(ms: &[f64]) -> Self {
        let median = median(ms);
        let dev: Vec<f64> = ms.iter().map(|v| (v - median).abs()).collect();
        Self {
            median_ms: median,
            mad_ms: self::median(&dev),
        }
    }
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stages {
    pub fft: StageStats,
    pub tokenize: StageStats,
    pub encode: StageStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case: BenchCase,
    pub vision_tokens: usize,
    pub audio_tokens: usize,
    pub stages: Stages,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub runs: usize,
    pub cases: Vec<CaseReport>,
}

pub fn default_cases() -> Vec<BenchCase> {
    vec![
        BenchCase {
            audio_seconds: 10.0,
            frames: 4,
        },
        BenchCase {
            audio_seconds: 20.0,
            frames: 8,
        },
    ]
}

fn time_ms<R>(f: impl FnOnce() -> Result<R>) -> Result<(f64, R)> {
    let t = Instant::now();
    let r = f()?;
    Ok((t.elapsed().as_secs_f64() * 1e3, r))
}

/// Times spectrogram extraction, tokenization and the encoder forward pass
/// for each case. The model's temporal tables are widened to fit the
/// longest case.
pub fn bench_latency(
    cfg: &ModelConfig,
    spec_cfg: &SpectrogramConfig,
    cases: &[BenchCase],
    runs: usize,
    seed: u64,
) -> Result<LatencyReport> {
    if runs == 0 {
        return Err(Error::config("bench needs at least one run"));
    }
    let mut cfg = cfg.clone();
    for c in cases {
        let n = (c.audio_seconds * spec_cfg.sample_rate as f64).round() as usize;
        cfg.max_audio_steps = cfg.max_audio_steps.max(cfg.audio_patch.time_steps(spec_cfg.n_frames(n)));
        cfg.max_frames = cfg.max_frames.max(c.frames);
    }
    let params = init_params::<f32>(&cfg, seed)?;
    let mut rng = rng::stream(seed, &[0x6265_6e63]);
    let mut reports = Vec::with_capacity(cases.len());
    for &case in cases {
        let n = (case.audio_seconds * spec_cfg.sample_rate as f64).round() as usize;
        let wave = Waveform::new((0..n).map(|_| rng.random_range(-0.5..0.5)).collect(), spec_cfg.sample_rate)?;
        let s = cfg.image_size;
        let clip = VideoClip::new(
            case.frames,
            s,
            s,
            cfg.channels,
            (0..case.frames * s * s * cfg.channels).map(|_| rng.random::<f32>()).collect(),
        )?;
        let (mut fft, mut tok, mut enc) = (Vec::new(), Vec::new(), Vec::new());
        let (mut lv, mut la) = (0, 0);
        for _ in 0..runs {
            let (t, spec) = time_ms(|| log_mel_spectrogram(&wave, spec_cfg))?;
            fft.push(t);
            let (t, (v, a)) = time_ms(|| Ok((patchify_frames(&clip, cfg.vision_patch)?, patchify_spectrogram(&spec, cfg.audio_patch)?)))?;
            tok.push(t);
            lv = v.len();
            la = a.len();
            let (t, _) = time_ms(|| {
                let mut g = Graph::<f32>::new();
                encode(&mut g, &params, &cfg, Some(&v), Some(&a)).map(|e| e.len())
            })?;
            enc.push(t);
        }
        reports.push(CaseReport {
            case,
            vision_tokens: lv,
            audio_tokens: la,
            stages: Stages {
                fft: StageStats::from_samples(&fft),
                tokenize: StageStats::from_samples(&tok),
                encode: StageStats::from_samples(&enc),
            },
        });
    }
    Ok(LatencyReport { runs, cases: reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_of_known_samples() {
        let s = StageStats::from_samples(&[1.0, 2.0, 3.0, 4.0, 100.0]);
        assert_eq!(s.median_ms, 3.0);
        assert_eq!(s.mad_ms, 1.0);
        assert_eq!(median(&[1.0, 3.0]), 2.0);
    }

    #[test]
    fn report_schema_has_three_stages() {
        let cases = [BenchCase {
            audio_seconds: 0.5,
            frames: 1,
        }];
        let r = bench_latency(&ModelConfig::desk(), &SpectrogramConfig::resampled_16k(), &cases, 2, 0).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        let stages = &v["cases"][0]["stages"];
        for k in ["fft", "tokenize", "encode"] {
            assert!(stages[k]["median_ms"].as_f64().unwrap() >= 0.0);
            assert!(stages[k]["mad_ms"].as_f64().unwrap() >= 0.0);
        }
        assert_eq!(r.cases[0].vision_tokens, 4);
    }
}
