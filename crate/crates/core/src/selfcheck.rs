//! Runtime verification suite: gradient checks against central differences,
//! brute-force oracles for the signal and ranking code, and the masking
//! invariants. Every check reports a magnitude and the threshold it was held
//! to so a failure can be read without rerunning anything.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{detect_speech_spans, log_mel_spectrogram, SpanConfig, Spectrogram, SpectrogramConfig, SpeechSpan, Waveform};
use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig};
use crate::numerics::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use crate::numerics::{GradFault, Graph, OpKind, ParamStore, Tensor, Var};
use crate::objectives::{make_vam_batch, mae_term, MaeNorm};
use crate::rng;
use crate::tokenizer::{
    mask_quota, patchify_frames, patchify_spectrogram, sample_mask_plan, unpatchify_frames, unpatchify_spectrogram,
    AudioPatch, MaskOptions, PatchSet, TokenCoord, VideoClip,
};
use crate::trainer::{build_step, rank_of, Prepared, SampleLabel, TrainOptions};

pub const REPORT_SCHEMA: &str = "tvlt-selfcheck/1";
/// Gradient checks pass at or below this relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Oracle equivalences pass at or below this relative error.
pub const ORACLE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub module: String,
    pub op: String,
    /// Worst observed deviation (relative error or mismatch count). JSON has
    /// no infinity, so a check that errored serializes this as null.
    #[serde(deserialize_with = "null_as_infinity")]
    pub magnitude: f64,
    pub threshold: f64,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

fn null_as_infinity<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

impl CheckResult {
    fn new(module: &str, op: &str, magnitude: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            module: module.into(),
            op: op.into(),
            magnitude,
            threshold,
            pass: magnitude.is_finite() && magnitude <= threshold,
            detail: detail.into(),
        }
    }

    fn errored(module: &str, op: &str, err: &Error) -> Self {
        Self {
            module: module.into(),
            op: op.into(),
            magnitude: f64::INFINITY,
            threshold: 0.0,
            pass: false,
            detail: err.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfcheckReport {
    pub schema: String,
    pub pass: bool,
    pub checks: Vec<CheckResult>,
}

impl SelfcheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

#[derive(Clone, Debug)]
pub struct SelfcheckOptions {
    pub seed: u64,
    /// Random instances per differentiable op.
    pub instances: usize,
    pub span_signals: usize,
    pub fault: Option<GradFault>,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 5,
            span_signals: 30,
            fault: None,
        }
    }
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Parameters for the single-op gradient probe of `op`; `None` for ops with
/// nothing to differentiate.
pub fn op_params(op: OpKind, seed: u64) -> Option<ParamStore<f64>> {
    let mut rng = rng::stream(seed, &[0x6f70, op as u64]);
    let items: &[(&str, &[usize])] = match op {
        OpKind::Leaf => return None,
        OpKind::Add | OpKind::Sub => &[("a", &[3, 4]), ("b", &[4]), ("w", &[3, 4])],
        OpKind::Mul => &[("a", &[3, 4]), ("b", &[3, 1])],
        OpKind::Scale | OpKind::Gelu | OpKind::Sigmoid | OpKind::Softplus => &[("a", &[2, 5]), ("w", &[2, 5])],
        OpKind::Log => &[("a", &[2, 5]), ("w", &[2, 5])],
        OpKind::MatMul => &[("a", &[2, 3, 4]), ("b", &[4, 5]), ("w", &[2, 3, 5])],
        OpKind::Reshape => &[("a", &[2, 6]), ("w", &[3, 4])],
        OpKind::Permute => &[("a", &[2, 3, 4]), ("w", &[4, 2, 3])],
        OpKind::LayerNorm => &[("a", &[3, 6]), ("gamma", &[6]), ("beta", &[6]), ("w", &[3, 6])],
        OpKind::Softmax => &[("a", &[2, 3, 4]), ("w", &[2, 3, 4])],
        OpKind::Sum | OpKind::Mean => &[("a", &[3, 4])],
        OpKind::Concat => &[("a", &[2, 4]), ("b", &[3, 4]), ("w", &[5, 4])],
        OpKind::Gather => &[("a", &[4, 3]), ("w", &[5, 3])],
    };
    let mut store = ParamStore::new();
    for &(name, shape) in items {
        // log needs a positive argument
        let (lo, hi) = if op == OpKind::Log && name == "a" { (0.2, 2.0) } else { (-1.5, 1.5) };
        store.insert(name, random_tensor(&mut rng, shape, lo, hi)).expect("names are distinct");
    }
    Some(store)
}

/// Scalar loss exercising `op` once, weighted so no gradient is symmetric.
pub fn op_loss(op: OpKind, g: &mut Graph<f64>, s: &ParamStore<f64>) -> Result<Var> {
    let p = |g: &mut Graph<f64>, name: &str| g.param(s, name);
    let weighted = |g: &mut Graph<f64>, y: Var| -> Result<Var> {
        let w = g.param(s, "w")?;
        let y = g.mul(y, w)?;
        Ok(g.sum(y))
    };
    match op {
        OpKind::Leaf => Err(Error::contract("leaf has no gradient rule to check")),
        OpKind::Add => {
            let (a, b) = (p(g, "a")?, p(g, "b")?);
            let y = g.add(a, b)?;
            weighted(g, y)
        }
        OpKind::Sub => {
            let (a, b) = (p(g, "a")?, p(g, "b")?);
            let y = g.sub(a, b)?;
            weighted(g, y)
        }
        OpKind::Mul => {
            let (a, b) = (p(g, "a")?, p(g, "b")?);
            let y = g.mul(a, b)?;
            let y = g.mul(y, a)?;
            Ok(g.sum(y))
        }
        OpKind::Scale => {
            let a = p(g, "a")?;
            let y = g.scale(a, -1.7);
            weighted(g, y)
        }
        OpKind::MatMul => {
            let (a, b) = (p(g, "a")?, p(g, "b")?);
            let y = g.matmul(a, b)?;
            weighted(g, y)
        }
        OpKind::Reshape => {
            let a = p(g, "a")?;
            let y = g.reshape(a, &[3, 4])?;
            weighted(g, y)
        }
        OpKind::Permute => {
            let a = p(g, "a")?;
            let y = g.permute(a, &[2, 0, 1])?;
            weighted(g, y)
        }
        OpKind::LayerNorm => {
            let (a, ga, be) = (p(g, "a")?, p(g, "gamma")?, p(g, "beta")?);
            let y = g.layer_norm(a, ga, be, 1e-5)?;
            weighted(g, y)
        }
        OpKind::Softmax => {
            let a = p(g, "a")?;
            let y = g.softmax(a, 2)?;
            let y = g.softmax(y, 1)?;
            weighted(g, y)
        }
        OpKind::Gelu => {
            let a = p(g, "a")?;
            let y = g.gelu(a);
            weighted(g, y)
        }
        OpKind::Sigmoid => {
            let a = p(g, "a")?;
            let y = g.sigmoid(a);
            weighted(g, y)
        }
        OpKind::Softplus => {
            let a = p(g, "a")?;
            let y = g.softplus(a);
            weighted(g, y)
        }
        OpKind::Log => {
            let a = p(g, "a")?;
            let y = g.log(a);
            weighted(g, y)
        }
        OpKind::Sum => {
            let a = p(g, "a")?;
            let s1 = g.sum(a);
            Ok(g.mul(s1, s1)?)
        }
        OpKind::Mean => {
            let a = p(g, "a")?;
            let sq = g.mul(a, a)?;
            let m = g.mean(sq)?;
            Ok(g.mul(m, m)?)
        }
        OpKind::Concat => {
            let (a, b) = (p(g, "a")?, p(g, "b")?);
            let y = g.concat(&[a, b])?;
            weighted(g, y)
        }
        OpKind::Gather => {
            let a = p(g, "a")?;
            let y = g.gather(a, &[3, 0, 3, 1, 2])?;
            weighted(g, y)
        }
    }
}

/// Gradient check of one op on one random instance.
pub fn gradcheck_op(op: OpKind, seed: u64, fault: Option<GradFault>) -> Result<GradCheckReport> {
    let store = op_params(op, seed).ok_or_else(|| Error::contract(format!("`{}` has no gradient", op.name())))?;
    let opts = GradCheckOptions {
        fault,
        seed,
        ..GradCheckOptions::default()
    };
    check_gradients(&store, |g, s| op_loss(op, g, s), &opts)
}

/// A compact model used where a full-size one would make finite differences
/// too slow: width 8, one layer, 4 vision and 4 audio tokens.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_enc: 8,
        n_enc_layers: 1,
        n_heads_enc: 2,
        d_dec: 4,
        n_dec_layers: 1,
        n_heads_dec: 2,
        mlp_ratio: 2,
        image_size: 4,
        channels: 3,
        vision_patch: 2,
        max_frames: 1,
        audio_patch: AudioPatch { time: 2, freq: 4 },
        n_mels: 8,
        max_audio_steps: 2,
        ..ModelConfig::desk()
    }
}

fn dummy_label(i: usize) -> SampleLabel {
    SampleLabel {
        id: format!("probe-{i}"),
        row_band: 0,
        column: 0,
        mel_bin: 0,
        tone_hz: 0.0,
        class: 0,
        value: 0.0,
    }
}

/// Random patch sets shaped for `cfg`, `n` samples.
pub fn probe_samples(cfg: &ModelConfig, n: usize, seed: u64) -> Result<Vec<Prepared>> {
    let mut rng = rng::stream(seed, &[0x7072_6f62]);
    let s = cfg.image_size;
    (0..n)
        .map(|i| {
            let frames = cfg.max_frames;
            let clip = VideoClip::new(
                frames,
                s,
                s,
                cfg.channels,
                (0..frames * s * s * cfg.channels).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            )?;
            let n_frames = cfg.max_audio_steps * cfg.audio_patch.time;
            let spec = Spectrogram {
                values: (0..n_frames * cfg.n_mels).map(|_| rng.random_range(-1.0..1.0)).collect(),
                n_frames,
                n_mels: cfg.n_mels,
                frame_rate: 32.0,
                floor_value: -1.0,
            };
            Ok(Prepared {
                vision: patchify_frames(&clip, cfg.vision_patch)?,
                audio: patchify_spectrogram(&spec, cfg.audio_patch)?,
                spans: Vec::new(),
                label: dummy_label(i),
            })
        })
        .collect()
}

/// Gradient check of the combined matching + reconstruction loss of one
/// two-sample step, all parameters of `cfg` in f64.
pub fn gradcheck_end_to_end(
    cfg: &ModelConfig,
    seed: u64,
    coords_per_tensor: Option<usize>,
    fault: Option<GradFault>,
) -> Result<GradCheckReport> {
    let store = init_params::<f64>(cfg, rng::derive_seed(seed, &[0x6532_65]))?;
    let data = probe_samples(cfg, 2, seed)?;
    let opts = TrainOptions {
        seed,
        ..TrainOptions::default()
    };
    let batch = [0, 1];
    let pairs = make_vam_batch(2, &mut rng::stream(seed, &[0x7061_6972]))?;
    let plans = data
        .iter()
        .enumerate()
        .map(|(i, s)| {
            sample_mask_plan(
                &s.vision.coords,
                &s.audio.coords,
                &opts.mask,
                None,
                rng::derive_seed(seed, &[0x706c_616e, i as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let gc = GradCheckOptions {
        max_coords_per_tensor: coords_per_tensor,
        seed,
        fault,
        ..GradCheckOptions::default()
    };
    check_gradients(
        &store,
        |g, s| Ok(build_step(g, s, cfg, &data, &batch, Some(&pairs), Some(&plans), &opts)?.loss),
        &gc,
    )
}

// Signal oracles

fn slaney_mel(hz: f64) -> f64 {
    if hz < 1000.0 {
        3.0 * hz / 200.0
    } else {
        15.0 + 27.0 * (hz / 1000.0).ln() / 6.4f64.ln()
    }
}

fn slaney_hz(mel: f64) -> f64 {
    if mel < 15.0 {
        200.0 * mel / 3.0
    } else {
        1000.0 * (6.4f64.ln() * (mel - 15.0) / 27.0).exp()
    }
}

/// Log-mel spectrogram by the textbook definition: centered frames, periodic
/// Hann window, O(N²) DFT, triangular area-normalized mel filters.
pub fn naive_log_mel(w: &Waveform, cfg: &SpectrogramConfig) -> Vec<Vec<f64>> {
    let n = cfg.n_fft;
    let sr = cfg.sample_rate as f64;
    let tau = 2.0 * std::f64::consts::PI;
    let cos: Vec<f64> = (0..n).map(|i| (tau * i as f64 / n as f64).cos()).collect();
    let sin: Vec<f64> = (0..n).map(|i| (tau * i as f64 / n as f64).sin()).collect();
    let bins = n / 2 + 1;
    let top = slaney_mel(sr / 2.0);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| slaney_hz(top * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let frames = 1 + w.samples.len() / cfg.hop;
    let sample = |i: isize| -> f64 {
        if i < 0 {
            0.0
        } else {
            w.samples.get(i as usize).copied().unwrap_or(0.0)
        }
    };
    (0..frames)
        .map(|t| {
            let start = (t * cfg.hop) as isize - (n / 2) as isize;
            let x: Vec<f64> = (0..n).map(|i| sample(start + i as isize) * (0.5 - 0.5 * cos[i])).collect();
            let power: Vec<f64> = (0..bins)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (i, &v) in x.iter().enumerate() {
                        let j = (k * i) % n;
                        re += v * cos[j];
                        im -= v * sin[j];
                    }
                    re * re + im * im
                })
                .collect();
            (0..cfg.n_mels)
                .map(|m| {
                    let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                    let e: f64 = power
                        .iter()
                        .enumerate()
                        .map(|(k, &p)| {
                            let f = k as f64 * sr / n as f64;
                            let wgt = if f > lo && f <= c {
                                (f - lo) / (c - lo)
                            } else if f > c && f < hi {
                                (hi - f) / (hi - c)
                            } else {
                                0.0
                            };
                            wgt * p
                        })
                        .sum();
                    (e * 2.0 / (hi - lo) + cfg.log_floor).ln()
                })
                .collect()
        })
        .collect()
}

/// Speech spans by exhaustive search over frame intervals: every maximal
/// interval whose active frames are never separated by more than the allowed
/// silence, cut into maximum-length pieces with short remainders dropped.
pub fn brute_force_spans(w: &Waveform, cfg: &SpanConfig) -> Vec<SpeechSpan> {
    let sr = w.sample_rate as f64;
    let frame_len = ((sr * cfg.analysis_window_s).round() as usize).max(1);
    let fl = frame_len as f64;
    let largest = |limit_s: f64| (0..).take_while(|&k| k as f64 * fl <= limit_s * sr + 1e-6).last().unwrap_or(0);
    let max_silence = largest(cfg.max_silence_s);
    let max_frames = largest(cfg.max_duration_s).max(1);
    let min_frames = (1..).find(|&k| k as f64 * fl >= cfg.min_duration_s * sr - 1e-6).unwrap();

    let n = w.samples.len() / frame_len;
    let active: Vec<bool> = (0..n)
        .map(|f| {
            let mut acc = 0.0;
            for i in 0..frame_len {
                let v = w.samples[f * frame_len + i] * 32768.0;
                acc += v * v;
            }
            10.0 * (acc / fl + 1.0).log10() >= cfg.energy_threshold
        })
        .collect();
    let is_run = |s: usize, e: usize| -> bool {
        if !active[s] || !active[e - 1] {
            return false;
        }
        let mut gap = 0;
        for &a in &active[s..e] {
            gap = if a { 0 } else { gap + 1 };
            if gap > max_silence {
                return false;
            }
        }
        let before = (s.saturating_sub(max_silence + 1)..s).any(|f| active[f]);
        let after = (e..(e + max_silence + 1).min(n)).any(|f| active[f]);
        !before && !after
    };
    let frame_s = fl / sr;
    let mut out = Vec::new();
    for s in 0..n {
        for e in s + 1..=n {
            if !is_run(s, e) {
                continue;
            }
            let mut a = s;
            while a < e {
                let b = (a + max_frames).min(e);
                if b - a == max_frames || b - a >= min_frames {
                    out.push(SpeechSpan {
                        start_s: a as f64 * frame_s,
                        end_s: b as f64 * frame_s,
                    });
                }
                a = b;
            }
        }
    }
    out
}

/// Random on/off tone bursts, some near the energy threshold.
pub fn burst_signal(seed: u64, sample_rate: u32) -> Result<Waveform> {
    let mut rng = rng::stream(seed, &[0x6275_7273]);
    let sr = sample_rate as f64;
    let n = (rng.random_range(0.5..2.5) * sr) as usize;
    let mut samples = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let len = (rng.random_range(0.01..0.7) * sr) as usize + 1;
        if rng.random_bool(0.5) {
            let amp = rng.random_range(0.05..0.6);
            let freq = rng.random_range(100.0..2000.0);
            for (k, s) in samples[i..(i + len).min(n)].iter_mut().enumerate() {
                *s = amp * (std::f64::consts::TAU * freq * k as f64 / sr).sin();
            }
        }
        i += len;
    }
    Waveform::new(samples, sample_rate)
}

// Individual suites

fn grad_suite(opts: &SelfcheckOptions, out: &mut Vec<CheckResult>) {
    for op in OpKind::ALL.into_iter().filter(|&o| o != OpKind::Leaf) {
        let mut worst = 0.0f64;
        let mut detail = String::new();
        let mut failed = None;
        for i in 0..opts.instances {
            match gradcheck_op(op, rng::derive_seed(opts.seed, &[i as u64]), opts.fault) {
                Ok(r) if !(r.max_rel_err <= worst) => {
                    worst = r.max_rel_err;
                    detail = format!("instance {i}, worst at {}", r.worst);
                }
                Ok(_) => {}
                Err(e) => failed = Some(e),
            }
        }
        out.push(match failed {
            Some(e) => CheckResult::errored("numerics", op.name(), &e),
            None => CheckResult::new("numerics", op.name(), worst, GRAD_TOLERANCE, detail),
        });
    }
    // every coordinate of a tiny model, then a sample of the desk model's
    let cases = [("end_to_end", tiny_config(), None), ("end_to_end_desk", ModelConfig::desk(), Some(2))];
    for (name, cfg, coords) in cases {
        out.push(match gradcheck_end_to_end(&cfg, opts.seed, coords, opts.fault) {
            Ok(r) => CheckResult::new(
                "model",
                name,
                r.max_rel_err,
                GRAD_TOLERANCE,
                format!("{} coordinates, worst at {}", r.coords_checked, r.worst),
            ),
            Err(e) => CheckResult::errored("model", name, &e),
        });
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn dft_check(seed: u64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    let mut rng = rng::stream(seed, &[0x6466_74]);
    for (k, cfg) in [SpectrogramConfig::resampled_16k(), SpectrogramConfig::default()].iter().enumerate() {
        let n = (rng.random_range(0.05..0.25) * cfg.sample_rate as f64) as usize;
        let w = Waveform::new((0..n).map(|_| rng.random_range(-0.5..0.5)).collect(), cfg.sample_rate)?;
        let fast = log_mel_spectrogram(&w, cfg)?;
        let slow = naive_log_mel(&w, cfg);
        if slow.len() != fast.n_frames {
            return Err(Error::shape(format!("config {k}: {} oracle frames vs {}", slow.len(), fast.n_frames)));
        }
        for (t, row) in slow.iter().enumerate() {
            for (m, &v) in row.iter().enumerate() {
                worst = worst.max(rel_err(fast.at(t, m), v));
            }
        }
    }
    Ok(CheckResult::new("audio", "log_mel", worst, ORACLE_TOLERANCE, "vs direct DFT at 16384 and 44100 Hz"))
}

fn span_check(opts: &SelfcheckOptions) -> Result<CheckResult> {
    let cfg = SpanConfig::default();
    let mut mismatches = 0usize;
    let mut nonempty = 0usize;
    for i in 0..opts.span_signals {
        let sr = if i % 2 == 0 { 16384 } else { 44100 };
        let w = burst_signal(rng::derive_seed(opts.seed, &[0x7370, i as u64]), sr)?;
        let got = detect_speech_spans(&w, &cfg);
        nonempty += usize::from(!got.is_empty());
        mismatches += usize::from(got != brute_force_spans(&w, &cfg));
    }
    Ok(CheckResult::new(
        "audio",
        "speech_spans",
        mismatches as f64,
        0.0,
        format!("{} signals, {nonempty} with spans", opts.span_signals),
    ))
}

fn patchify_check(seed: u64) -> Result<CheckResult> {
    let mut rng = rng::stream(seed, &[0x7061_7463]);
    let mut bad = 0usize;
    for _ in 0..10 {
        let p = rng.random_range(1..5);
        let (f, r, c) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
        let n = f * r * p * c * p * 3;
        let clip = VideoClip::new(f, r * p, c * p, 3, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())?;
        let set = patchify_frames(&clip, p)?;
        bad += usize::from(unpatchify_frames(&set, p, 3)? != clip);
        for (i, tok) in set.coords.tokens.iter().enumerate() {
            let TokenCoord::Vision { frame, row, col } = *tok else {
                bad += 1;
                continue;
            };
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..3 {
                        let want = clip.pixel(frame, row * p + y, col * p + x, ch) as f64;
                        bad += usize::from(set.patch(i)[(y * p + x) * 3 + ch] != want);
                    }
                }
            }
        }
        let patch = AudioPatch {
            time: rng.random_range(1..4),
            freq: 4,
        };
        let steps = rng.random_range(1..5);
        let frames = steps * patch.time;
        let spec = Spectrogram {
            values: (0..frames * 16).map(|_| rng.random_range(-1.0..1.0)).collect(),
            n_frames: frames,
            n_mels: 16,
            frame_rate: 32.0,
            floor_value: -9.0,
        };
        let (tf, tm, vals) = unpatchify_spectrogram(&patchify_spectrogram(&spec, patch)?, patch)?;
        bad += usize::from(tf != frames || tm != 16 || vals != spec.values);
    }
    Ok(CheckResult::new("tokenizer", "patchify", bad as f64, 0.0, "round trip and pixel indexing"))
}

fn ranking_check(seed: u64) -> CheckResult {
    let mut rng = rng::stream(seed, &[0x7261_6e6b]);
    let mut bad = 0usize;
    for _ in 0..50 {
        let n = rng.random_range(2..12);
        let scores: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.3) { 0.5 } else { rng.random_range(-1.0..1.0) })
            .collect();
        // selection sort: repeatedly take the best remaining candidate
        let mut left: Vec<usize> = (0..n).collect();
        let mut order = Vec::with_capacity(n);
        while !left.is_empty() {
            let mut best = 0;
            for k in 1..left.len() {
                if scores[left[k]] > scores[left[best]] {
                    best = k;
                }
            }
            order.push(left.remove(best));
        }
        for t in 0..n {
            let want = order.iter().position(|&c| c == t).unwrap() + 1;
            bad += usize::from(rank_of(&scores, t) != want);
        }
    }
    CheckResult::new("trainer", "ranking", bad as f64, 0.0, "rank_of vs selection sort")
}

fn mask_check(seed: u64) -> Result<Vec<CheckResult>> {
    let cfg = ModelConfig::desk();
    let data = probe_samples(&cfg, 1, seed)?;
    let (v, a) = (&data[0].vision, &data[0].audio);
    let opts = MaskOptions::default();
    let per_frame = v.coords.per_step();
    let want = (0.75 * per_frame as f64).round() as usize;
    let mut bad_count = 0usize;
    let mut bad_partition = 0usize;
    for i in 0..100 {
        let plan = sample_mask_plan(&v.coords, &a.coords, &opts, None, rng::derive_seed(seed, &[0x6d, i]))?;
        for f in 0..v.coords.steps() {
            let k = plan.vision.masked.iter().filter(|&&t| t / per_frame == f).count();
            bad_count += usize::from(k != want);
        }
        bad_count += usize::from(plan.audio.masked.len() != mask_quota(opts.ratio, a.len())?);
        bad_partition += usize::from(plan.vision.validate(v.len()).is_err() || plan.audio.validate(a.len()).is_err());
    }

    // MAE term: unmasked targets are irrelevant and get no gradient.
    let mut rng = rng::stream(seed, &[0x6d61_6567]);
    let plan = sample_mask_plan(&v.coords, &a.coords, &opts, None, seed)?;
    let target = patch_tensor_f64(v)?;
    let recon = random_tensor(&mut rng, target.shape(), -1.0, 1.0);
    let mut perturbed = target.clone();
    let d = v.patch_dim;
    for &i in &plan.vision.visible {
        for x in &mut perturbed.data_mut()[i * d..(i + 1) * d] {
            *x += rng.random_range(-5.0..5.0);
        }
    }
    let loss_and_grad = |t: &Tensor<f64>| -> Result<(f64, Tensor<f64>)> {
        let mut g = Graph::<f64>::new();
        let r = g.leaf(recon.clone());
        let l = mae_term(&mut g, r, t, &plan.vision.masked, MaeNorm::Sum)?;
        g.backward(l)?;
        let grad = g.grad(r).ok_or_else(|| Error::contract("reconstruction received no gradient"))?;
        Ok((g.value(l).item(), grad))
    };
    let (l0, grad) = loss_and_grad(&target)?;
    let (l1, _) = loss_and_grad(&perturbed)?;
    let leaked: f64 = plan
        .vision
        .visible
        .iter()
        .flat_map(|&i| grad.data()[i * d..(i + 1) * d].iter())
        .map(|x| x.abs())
        .fold(0.0, f64::max);
    Ok(vec![
        CheckResult::new("tokenizer", "mask_quota", bad_count as f64, 0.0, "per-frame count is round(0.75·P)"),
        CheckResult::new("tokenizer", "mask_partition", bad_partition as f64, 0.0, "visible ∪ masked covers every token once"),
        CheckResult::new("objectives", "mae_unmasked_invariance", (l0 - l1).abs(), 0.0, "loss after perturbing visible targets"),
        CheckResult::new("objectives", "mae_unmasked_gradient", leaked, 0.0, "largest gradient on a visible reconstruction"),
    ])
}

fn patch_tensor_f64(p: &PatchSet) -> Result<Tensor<f64>> {
    Tensor::new(vec![p.len(), p.patch_dim], p.data.clone())
}

/// Runs every suite. Errors inside a suite become failing checks rather
/// than aborting the report.
pub fn run_selfcheck(opts: &SelfcheckOptions) -> SelfcheckReport {
    let mut checks = Vec::new();
    grad_suite(opts, &mut checks);
    let push = |checks: &mut Vec<CheckResult>, module: &str, op: &str, r: Result<CheckResult>| {
        checks.push(r.unwrap_or_else(|e| CheckResult::errored(module, op, &e)));
    };
    push(&mut checks, "audio", "log_mel", dft_check(opts.seed));
    push(&mut checks, "audio", "speech_spans", span_check(opts));
    push(&mut checks, "tokenizer", "patchify", patchify_check(opts.seed));
    checks.push(ranking_check(opts.seed));
    match mask_check(opts.seed) {
        Ok(c) => checks.extend(c),
        Err(e) => checks.push(CheckResult::errored("tokenizer", "mask_plan", &e)),
    }
    SelfcheckReport {
        schema: REPORT_SCHEMA.into(),
        pass: checks.iter().all(|c| c.pass),
        checks,
    }
}
