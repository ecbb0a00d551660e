use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

/// Reads a PCM16 WAV file, averaging stereo to mono and scaling by 1/32768.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "expected PCM16, got {:?} at {} bits",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(Error::Format(format!("{channels} channels; expected mono or stereo")));
    }
    let raw = reader.samples::<i16>().collect::<Result<Vec<i16>, _>>()?;
    if raw.len() % channels != 0 {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            "truncated final sample frame",
        )));
    }
    let samples = raw
        .chunks_exact(channels)
        .map(|frame| frame.iter().map(|&s| s as f64 / 32768.0).sum::<f64>() / channels as f64)
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

/// Writes mono PCM16, clamping to the representable range.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &wave.samples {
        writer.write_sample(to_i16(s))?;
    }
    writer.finalize()?;
    Ok(())
}

pub fn to_i16(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, channels: u16, bits: u16, frames: &[Vec<i32>]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: 44100,
            bits_per_sample: bits,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for f in frames {
            for &s in f {
                w.write_sample(s).unwrap();
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn one_second_of_silence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        write_raw(&p, 1, 16, &vec![vec![0]; 44100]);
        let w = load_wav(&p).unwrap();
        assert_eq!(w.samples.len(), 44100);
        assert!(w.samples.iter().all(|&s| s == 0.0));
        assert_eq!(w.sample_rate, 44100);
    }

    #[test]
    fn full_scale_and_stereo_average() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_raw(&p, 1, 16, &[vec![32767]]);
        let w = load_wav(&p).unwrap();
        assert_eq!(w.samples[0], 32767.0 / 32768.0);
        assert!((w.samples[0] - 0.99997).abs() < 1e-5);

        let p = dir.path().join("b.wav");
        write_raw(&p, 2, 16, &[vec![16384, -16384]]);
        assert_eq!(load_wav(&p).unwrap().samples, vec![0.0]);
    }

    #[test]
    fn rejects_other_bit_depths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.wav");
        write_raw(&p, 1, 24, &[vec![1000]]);
        assert!(matches!(load_wav(&p), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.wav");
        write_raw(&p, 1, 16, &vec![vec![100]; 1000]);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 501]).unwrap();
        assert!(matches!(load_wav(&p), Err(Error::Io(_))));
    }
}
