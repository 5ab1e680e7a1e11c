use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{frame_count, reflect_pad, Waveform, HOP_LENGTH, N_FFT, WIN_LENGTH};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            n_fft: N_FFT,
            win_length: WIN_LENGTH,
            hop_length: HOP_LENGTH,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_fft != self.win_length {
            return Err(Error::Config("n_fft must equal win_length".into()));
        }
        if self.win_length == 0 || self.hop_length * 4 != self.win_length {
            return Err(Error::Config("hop_length must be a quarter of win_length".into()));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Periodic Hann window.
    pub fn window(&self) -> Vec<f64> {
        let n = self.win_length as f64;
        (0..self.win_length)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos())
            .collect()
    }
}

/// Magnitude spectrogram, `frames x (n_fft/2 + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSpectrogram {
    pub values: Array2<f64>,
    pub config: StftConfig,
}

impl LinearSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }
}

fn forward_plan(n: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_forward(n)
}

/// Complex STFT over the positive-frequency bins.
pub fn stft_complex(w: &Waveform, cfg: &StftConfig) -> Result<Array2<Complex64>> {
    cfg.validate()?;
    let x = w.samples();
    if x.len() < cfg.win_length {
        return Err(Error::input("waveform shorter than one STFT window"));
    }
    let pad = cfg.n_fft / 2;
    let padded = reflect_pad(x, pad);
    let frames = frame_count(x.len(), cfg.hop_length);
    let bins = cfg.bins();
    let window = cfg.window();
    let fft = forward_plan(cfg.n_fft);
    let mut out = Array2::zeros((frames, bins));
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.n_fft];
    for t in 0..frames {
        let start = t * cfg.hop_length;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            out[[t, k]] = buf[k];
        }
    }
    Ok(out)
}

/// Magnitude STFT with a periodic Hann window and reflect center padding.
pub fn stft_linear(w: &Waveform, cfg: &StftConfig) -> Result<LinearSpectrogram> {
    let spec = stft_complex(w, cfg)?;
    Ok(LinearSpectrogram {
        values: spec.mapv(|c| c.norm()),
        config: *cfg,
    })
}

/// Inverse of [`stft_complex`] by weighted overlap-add. Returns
/// `frames * hop` samples.
pub fn istft(spec: &Array2<Complex64>, cfg: &StftConfig) -> Vec<f64> {
    let frames = spec.nrows();
    let n = cfg.n_fft;
    let pad = n / 2;
    let window = cfg.window();
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let total = (frames - 1) * cfg.hop_length + n;
    let mut acc = vec![0.0; total];
    let mut norm = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..frames {
        for k in 0..=n / 2 {
            buf[k] = spec[[t, k]];
        }
        for k in n / 2 + 1..n {
            buf[k] = spec[[t, n - k]].conj();
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop_length;
        for i in 0..n {
            acc[start + i] += buf[i].re / n as f64 * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    let len = frames * cfg.hop_length;
    (0..len)
        .map(|i| {
            let j = i + pad;
            if j < total && norm[j] > 1e-8 {
                acc[j] / norm[j]
            } else {
                0.0
            }
        })
        .collect()
}
