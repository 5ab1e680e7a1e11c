//! Audio front-end: framing, STFT, mel filterbank, frequency-axis
//! augmentation, pitch and energy tracking, and WAV I/O.
//!
//! Every framed representation uses the same center framing: frame `t` is
//! centered on sample `t * hop`, the signal is reflect-padded by half a
//! window on both sides, and a length-`L` waveform yields `ceil(L / hop)`
//! frames.

mod augment;
mod mel;
mod pitch;
mod stft;
pub mod wav;

pub use augment::{random_sr_augment, sr_augment, SR_RATIO_MAX, SR_RATIO_MIN};
pub use mel::{mel_filterbank, mel_spectrogram, MelSpectrogram, LOG_FLOOR, MEL_BINS, MEL_FMAX};
pub use pitch::{estimate_f0, rms_energy, EnergyTrack, F0Track, F0_MAX, F0_MIN, VOICING_THRESHOLD};
pub use stft::{istft, stft_complex, stft_linear, LinearSpectrogram, StftConfig};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const WIN_LENGTH: usize = 1280;
pub const HOP_LENGTH: usize = 320;
pub const N_FFT: usize = 1280;
pub const LINEAR_BINS: usize = N_FFT / 2 + 1;

/// Mono audio at 16 kHz.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::input(format!(
                "sample rate {sample_rate} Hz is not supported, expected {SAMPLE_RATE} Hz"
            )));
        }
        if samples.len() < WIN_LENGTH {
            return Err(Error::input(format!(
                "waveform has {} samples, at least {WIN_LENGTH} required",
                samples.len()
            )));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::input(format!("non-finite sample at index {i}")));
        }
        Ok(Waveform { samples, sample_rate })
    }

    /// Builds a 16 kHz waveform.
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, SAMPLE_RATE)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|x| x * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

/// Number of center-framed frames for a signal of `len` samples.
pub fn frame_count(len: usize, hop: usize) -> usize {
    len.div_ceil(hop)
}

/// Reflect-pads `x` by `pad` samples on both sides (numpy `reflect` mode).
pub(crate) fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    assert!(n > pad, "reflect padding needs more samples than the pad width");
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|i| x[n - 2 - i]));
    out
}

/// Computes mel spectrogram features of a waveform in one call.
pub fn waveform_to_mel(w: &Waveform) -> Result<MelSpectrogram> {
    let lin = stft_linear(w, &StftConfig::default())?;
    mel_spectrogram(&lin)
}
