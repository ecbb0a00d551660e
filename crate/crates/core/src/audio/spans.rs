//! Energy-based speech event detection.
//!
//! Samples are read as int16 magnitudes, framed into 10 ms analysis windows
//! and thresholded on `10·log10(mean(s²) + 1)`. Active runs separated by
//! short silences are merged into events, events below the minimum duration
//! are dropped and long ones are cut into maximum-length pieces.

use serde::{Deserialize, Serialize};

use super::Waveform;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanConfig {
    pub analysis_window_s: f64,
    pub energy_threshold: f64,
    pub max_silence_s: f64,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
}

impl Default for SpanConfig {
    fn default() -> Self {
        Self {
            analysis_window_s: 0.01,
            energy_threshold: 70.0,
            max_silence_s: 0.05,
            min_duration_s: 0.3,
            max_duration_s: 1.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeechSpan {
    pub start_s: f64,
    pub end_s: f64,
}

impl SpeechSpan {
    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn intersects(&self, start_s: f64, end_s: f64) -> bool {
        start_s < self.end_s && end_s > self.start_s
    }
}

/// Frame-domain limits derived from a [`SpanConfig`] at a given sample rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameLimits {
    pub frame_len: usize,
    pub max_silence: usize,
    pub min_frames: usize,
    pub max_frames: usize,
}

const EPS: f64 = 1e-9;

impl FrameLimits {
    pub fn new(cfg: &SpanConfig, sample_rate: u32) -> Self {
        let sr = sample_rate as f64;
        let frame_len = ((sr * cfg.analysis_window_s).round() as usize).max(1);
        let frame_s = frame_len as f64 / sr;
        Self {
            frame_len,
            max_silence: (cfg.max_silence_s / frame_s + EPS).floor() as usize,
            min_frames: ((cfg.min_duration_s / frame_s - EPS).ceil() as usize).max(1),
            max_frames: ((cfg.max_duration_s / frame_s + EPS).floor() as usize).max(1),
        }
    }
}

/// Per-frame energy in dB over complete analysis windows.
pub fn frame_energies(w: &Waveform, frame_len: usize) -> Vec<f64> {
    w.samples
        .chunks_exact(frame_len)
        .map(|frame| {
            let ms = frame
                .iter()
                .map(|&s| {
                    let v = s * 32768.0;
                    v * v
                })
                .sum::<f64>()
                / frame.len() as f64;
            10.0 * (ms + 1.0).log10()
        })
        .collect()
}

/// Events as half-open frame ranges from a per-frame activity mask.
pub fn events_from_activity(active: &[bool], limits: FrameLimits) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < active.len() {
        if !active[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < active.len() && active[i] {
            i += 1;
        }
        match runs.last_mut() {
            Some(last) if start - last.1 <= limits.max_silence => last.1 = i,
            _ => runs.push((start, i)),
        }
    }
    let mut events = Vec::new();
    for (start, end) in runs {
        let mut s = start;
        while end - s > limits.max_frames {
            events.push((s, s + limits.max_frames));
            s += limits.max_frames;
        }
        if end - s >= limits.min_frames {
            events.push((s, end));
        }
    }
    events
}

pub fn detect_speech_spans(w: &Waveform, cfg: &SpanConfig) -> Vec<SpeechSpan> {
    let limits = FrameLimits::new(cfg, w.sample_rate);
    let active: Vec<bool> = frame_energies(w, limits.frame_len)
        .into_iter()
        .map(|e| e >= cfg.energy_threshold)
        .collect();
    let frame_s = limits.frame_len as f64 / w.sample_rate as f64;
    events_from_activity(&active, limits)
        .into_iter()
        .map(|(s, e)| SpeechSpan {
            start_s: s as f64 * frame_s,
            end_s: e as f64 * frame_s,
        })
        .collect()
}
