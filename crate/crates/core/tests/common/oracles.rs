//! Slow reference implementations written from the definitions, used to
//! check the production code paths.

use std::f64::consts::PI;

use tvlt::audio::{SpanConfig, SpectrogramConfig, Waveform};

fn hz_to_slaney(hz: f64) -> f64 {
    // linear below 1 kHz at 3 mels per 200 Hz, logarithmic above
    if hz < 1000.0 {
        3.0 * hz / 200.0
    } else {
        15.0 + 27.0 * (hz / 1000.0).ln() / 6.4f64.ln()
    }
}

fn slaney_to_hz(mel: f64) -> f64 {
    if mel < 15.0 {
        200.0 * mel / 3.0
    } else {
        1000.0 * (6.4f64.ln() * (mel - 15.0) / 27.0).exp()
    }
}

/// Log-mel energies from a direct O(N²) DFT of each centered, Hann-windowed
/// frame and an explicitly built area-normalized triangular filterbank.
pub fn log_mel(w: &Waveform, cfg: &SpectrogramConfig) -> Vec<Vec<f64>> {
    let n = cfg.n_fft;
    let sr = cfg.sample_rate as f64;
    let half = n as isize / 2;
    let mel_top = hz_to_slaney(sr / 2.0);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| slaney_to_hz(mel_top * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let window: Vec<f64> = (0..n).map(|i| (PI * i as f64 / n as f64).sin().powi(2)).collect();
    let twiddle: Vec<(f64, f64)> = (0..n)
        .map(|j| {
            let a = -2.0 * PI * j as f64 / n as f64;
            (a.cos(), a.sin())
        })
        .collect();
    let mut rows = Vec::new();
    let mut t = 0;
    while t * cfg.hop <= w.samples.len() {
        let centre = (t * cfg.hop) as isize;
        let x: Vec<f64> = (0..n)
            .map(|i| {
                let s = centre - half + i as isize;
                if s >= 0 && (s as usize) < w.samples.len() {
                    w.samples[s as usize] * window[i]
                } else {
                    0.0
                }
            })
            .collect();
        let power: Vec<f64> = (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, v) in x.iter().enumerate() {
                    let (c, s) = twiddle[(i * k) % n];
                    re += v * c;
                    im += v * s;
                }
                re * re + im * im
            })
            .collect();
        rows.push(
            (0..cfg.n_mels)
                .map(|m| {
                    let (a, b, c) = (edges[m], edges[m + 1], edges[m + 2]);
                    let mut e = 0.0;
                    for (k, p) in power.iter().enumerate() {
                        let f = k as f64 * sr / n as f64;
                        let tri = ((f - a) / (b - a)).min((c - f) / (c - b)).max(0.0);
                        e += tri * p;
                    }
                    (e * 2.0 / (c - a) + cfg.log_floor).ln()
                })
                .collect(),
        );
        t += 1;
    }
    rows
}

/// Mel power (before the log) from the same direct computation.
pub fn mel_power(w: &Waveform, cfg: &SpectrogramConfig) -> Vec<Vec<f64>> {
    log_mel(w, cfg)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.exp() - cfg.log_floor).collect())
        .collect()
}

/// Speech spans in seconds by exhaustive search: every frame interval that is
/// a maximal group of loud frames with short gaps, cut from its start into
/// pieces no longer than the maximum, keeping pieces that meet the minimum.
pub fn spans(w: &Waveform, cfg: &SpanConfig) -> Vec<(f64, f64)> {
    let sr = w.sample_rate as f64;
    let len = ((cfg.analysis_window_s * sr).round() as usize).max(1);
    let frame_s = len as f64 / sr;
    let tol = 1e-9;
    let loud: Vec<bool> = w
        .samples
        .chunks(len)
        .filter(|c| c.len() == len)
        .map(|c| {
            let ms = c.iter().map(|s| (s * 32768.0).powi(2)).sum::<f64>() / len as f64;
            10.0 * (1.0 + ms).log10() >= cfg.energy_threshold
        })
        .collect();
    let n = loud.len();
    let gap_ok = |quiet: usize| quiet as f64 * frame_s <= cfg.max_silence_s + tol;
    let mut out = Vec::new();
    for s in 0..n {
        for e in s + 1..=n {
            if !loud[s] || !loud[e - 1] {
                continue;
            }
            let mut quiet = 0;
            let mut joined = true;
            for &l in &loud[s..e] {
                quiet = if l { 0 } else { quiet + 1 };
                joined &= gap_ok(quiet);
            }
            let loud_before = (0..s).rev().take_while(|&f| gap_ok(s - f - 1)).any(|f| loud[f]);
            let loud_after = (e..n).take_while(|&f| gap_ok(f - e)).any(|f| loud[f]);
            if !joined || loud_before || loud_after {
                continue;
            }
            let mut a = s;
            while a < e {
                let mut b = a + 1;
                while b < e && (b + 1 - a) as f64 * frame_s <= cfg.max_duration_s + tol {
                    b += 1;
                }
                let dur = (b - a) as f64 * frame_s;
                if dur >= cfg.min_duration_s - tol && dur <= cfg.max_duration_s + tol {
                    out.push((a as f64 * frame_s, b as f64 * frame_s));
                }
                a = b;
            }
        }
    }
    out
}

/// On/off tone bursts of random length and level, some near the threshold.
pub fn burst_signal(seed: u64, sample_rate: u32) -> Waveform {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let n = (rng.random_range(0.5..2.5) * sr) as usize;
    let mut samples = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let len = (rng.random_range(0.01..0.7) * sr) as usize + 1;
        if rng.random_bool(0.5) {
            let amp = rng.random_range(0.04..0.6);
            let freq = rng.random_range(100.0..2000.0);
            for (k, s) in samples[i..(i + len).min(n)].iter_mut().enumerate() {
                *s = amp * (2.0 * PI * freq * k as f64 / sr).sin();
            }
        }
        i += len;
    }
    Waveform::new(samples, sample_rate).unwrap()
}

/// 1-based rank of `target` after a full sort by descending score with ties
/// going to the lower index.
pub fn rank_by_sorting(scores: &[f64], target: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.iter().position(|&i| i == target).unwrap() + 1
}

/// Trainable parameters of a pre-norm ViT encoder with the given patch
/// inputs and positional tables, counted layer by layer.
pub struct VitShape {
    pub width: usize,
    pub depth: usize,
    pub mlp: usize,
    pub patch_inputs: Vec<usize>,
    pub table_rows: usize,
    pub modalities: usize,
}

pub fn vit_params(v: &VitShape) -> usize {
    let d = v.width;
    let dense = |i: usize, o: usize| i * o + o;
    let ln = 2 * d;
    let layer = ln + dense(d, 3 * d) + dense(d, d) + ln + dense(d, v.mlp) + dense(v.mlp, d);
    let projections: usize = v.patch_inputs.iter().map(|&i| dense(i, d)).sum();
    let cls = d;
    projections + v.table_rows * d + v.modalities * d + cls + v.depth * layer + ln
}
