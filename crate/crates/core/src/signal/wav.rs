//! Mono PCM-16 WAV at 16 kHz. Other formats are rejected rather than
//! converted.

use std::path::Path;

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::input(format!(
            "{}: {} channels, expected mono",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::input(format!(
            "{}: sample rate {} Hz, expected {SAMPLE_RATE} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::input(format!("{}: expected 16-bit PCM", path.display())));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate).map_err(|e| Error::input(format!("{}: {e}", path.display())))
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    for &s in w.samples() {
        writer.write_sample(quantize(s))?;
    }
    writer.finalize()?;
    Ok(())
}

/// Rounds a sample in [-1, 1] to PCM-16, clipping out-of-range values.
pub fn quantize(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}
