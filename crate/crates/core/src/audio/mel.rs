use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub log_floor: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            sample_rate: 44100,
            n_fft: 2048,
            hop: 512,
            n_mels: 128,
            log_floor: 1e-6,
        }
    }
}

impl SpectrogramConfig {
    /// Same STFT parameters at 16384 Hz, i.e. 32 frames per second.
    pub fn resampled_16k() -> Self {
        Self {
            sample_rate: 16384,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fft < self.hop || self.hop == 0 {
            return Err(Error::config(format!(
                "need n_fft ≥ hop > 0 (n_fft {}, hop {})",
                self.n_fft, self.hop
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::config("n_mels must be ≥ 1"));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::config("log_floor must be > 0"));
        }
        if self.sample_rate == 0 {
            return Err(Error::config("sample_rate must be > 0"));
        }
        Ok(())
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    /// Frames produced for `n_samples` under centered framing.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        1 + n_samples / self.hop
    }

    pub fn floor_value(&self) -> f64 {
        self.log_floor.ln()
    }
}

/// `T × n_mels` log-mel energies, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub values: Vec<f64>,
    pub n_frames: usize,
    pub n_mels: usize,
    pub frame_rate: f64,
    /// Value used for silence and for time padding: `ln(log_floor)`.
    pub floor_value: f64,
}

impl Spectrogram {
    pub fn at(&self, frame: usize, mel: usize) -> f64 {
        self.values[frame * self.n_mels + mel]
    }

    pub fn frame(&self, frame: usize) -> &[f64] {
        &self.values[frame * self.n_mels..(frame + 1) * self.n_mels]
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= min_log_hz {
        min_log_mel + (hz / min_log_hz).ln() / logstep
    } else {
        hz / f_sp
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        min_log_hz * (logstep * (mel - min_log_mel)).exp()
    } else {
        f_sp * mel
    }
}

/// The `n_mels + 2` band edges (Hz) of the Slaney mel filterbank over
/// `[0, sr/2]`; filter `i` peaks at edge `i + 1`.
pub fn mel_band_edges(cfg: &SpectrogramConfig) -> Vec<f64> {
    let top = hz_to_mel(cfg.sample_rate as f64 / 2.0);
    let n = cfg.n_mels + 2;
    (0..n)
        .map(|i| mel_to_hz(top * i as f64 / (n - 1) as f64))
        .collect()
}

/// Center frequency of every mel filter.
pub fn mel_center_frequencies(cfg: &SpectrogramConfig) -> Vec<f64> {
    mel_band_edges(cfg)[1..=cfg.n_mels].to_vec()
}

/// Slaney-normalized triangular filterbank, `n_mels × (n_fft/2 + 1)`.
pub fn mel_filterbank(cfg: &SpectrogramConfig) -> Vec<Vec<f64>> {
    let n_bins = cfg.n_fft / 2 + 1;
    let sr = cfg.sample_rate as f64;
    let fft_freqs: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * sr / cfg.n_fft as f64)
        .collect();
    let edges = mel_band_edges(cfg);
    (0..cfg.n_mels)
        .map(|i| {
            let (lo, mid, hi) = (edges[i], edges[i + 1], edges[i + 2]);
            let norm = 2.0 / (hi - lo);
            fft_freqs
                .iter()
                .map(|&f| {
                    let rising = (f - lo) / (mid - lo);
                    let falling = (hi - f) / (hi - mid);
                    rising.min(falling).max(0.0) * norm
                })
                .collect()
        })
        .collect()
}

fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Power spectrogram `|STFT|²`, `T × (n_fft/2 + 1)`, centered frames with
/// zero padding of `n_fft/2` on both sides.
pub fn power_spectrogram(w: &Waveform, cfg: &SpectrogramConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let n_fft = cfg.n_fft;
    let pad = n_fft / 2;
    let mut padded = vec![0.0; w.samples.len() + 2 * pad];
    padded[pad..pad + w.samples.len()].copy_from_slice(&w.samples);
    let window = hann_periodic(n_fft);
    let n_frames = cfg.n_frames(w.samples.len());
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut out = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let start = t * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..=n_fft / 2].iter().map(|c| c.norm_sqr()).collect());
    }
    Ok(out)
}

/// Mel power before log compression, `T × n_mels`.
pub fn mel_power_spectrogram(w: &Waveform, cfg: &SpectrogramConfig) -> Result<Vec<Vec<f64>>> {
    let power = power_spectrogram(w, cfg)?;
    let fb = mel_filterbank(cfg);
    Ok(power
        .iter()
        .map(|frame| {
            fb.iter()
                .map(|filter| filter.iter().zip(frame).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect())
}

/// `ln(mel power + log_floor)` for every frame and mel band.
pub fn log_mel_spectrogram(w: &Waveform, cfg: &SpectrogramConfig) -> Result<Spectrogram> {
    if w.samples.is_empty() {
        return Err(Error::contract("log-mel of an empty waveform"));
    }
    let mel = mel_power_spectrogram(w, cfg)?;
    let n_frames = mel.len();
    let values = mel
        .into_iter()
        .flat_map(|frame| frame.into_iter().map(|p| (p + cfg.log_floor).ln()))
        .collect();
    Ok(Spectrogram {
        values,
        n_frames,
        n_mels: cfg.n_mels,
        frame_rate: cfg.frame_rate(),
        floor_value: cfg.floor_value(),
    })
}
