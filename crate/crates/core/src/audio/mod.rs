//! Waveforms, log-mel spectrograms and speech-span detection.

mod mel;
mod spans;
mod wav;

pub use mel::{
    log_mel_spectrogram, mel_band_edges, mel_center_frequencies, mel_filterbank,
    mel_power_spectrogram, power_spectrogram, Spectrogram, SpectrogramConfig,
};
pub use spans::{
    detect_speech_spans, events_from_activity, frame_energies, FrameLimits, SpanConfig,
    SpeechSpan,
};
pub use wav::{load_wav, to_i16, write_wav};

use crate::error::{Error, Result};

/// Mono audio in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::contract("waveform has no samples"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * alpha).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Spans serialized as a JSON array of `{start_s, end_s}`.
pub fn spans_to_json(spans: &[SpeechSpan]) -> Result<String> {
    Ok(serde_json::to_string(spans)?)
}
