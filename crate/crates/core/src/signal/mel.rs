use std::sync::OnceLock;

use ndarray::Array2;

use super::{LinearSpectrogram, LINEAR_BINS, N_FFT, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const MEL_BINS: usize = 80;
pub const MEL_FMIN: f64 = 0.0;
pub const MEL_FMAX: f64 = 8000.0;
/// Magnitude floor applied before the log.
pub const LOG_FLOOR: f64 = 1e-5;

/// Log-compressed mel magnitudes, `frames x 80`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f64>,
    pub fmin: f64,
    pub fmax: f64,
}

impl MelSpectrogram {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.ncols() != MEL_BINS {
            return Err(Error::input(format!(
                "mel spectrogram must have {MEL_BINS} bins, got {}",
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("mel spectrogram contains non-finite values"));
        }
        Ok(MelSpectrogram {
            values,
            fmin: MEL_FMIN,
            fmax: MEL_FMAX,
        })
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if f >= min_log_hz {
        min_log_mel + (f / min_log_hz).ln() / logstep
    } else {
        f / f_sp
    }
}

fn mel_to_hz(m: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if m >= min_log_mel {
        min_log_hz * (logstep * (m - min_log_mel)).exp()
    } else {
        f_sp * m
    }
}

fn build_filterbank() -> Array2<f64> {
    let sr = SAMPLE_RATE as f64;
    let lo = hz_to_mel(MEL_FMIN);
    let hi = hz_to_mel(MEL_FMAX);
    let edges: Vec<f64> = (0..MEL_BINS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (MEL_BINS + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((MEL_BINS, LINEAR_BINS));
    for m in 0..MEL_BINS {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let enorm = 2.0 / (right - left);
        for k in 0..LINEAR_BINS {
            let f = k as f64 * sr / N_FFT as f64;
            let rise = (f - left) / (center - left);
            let fall = (right - f) / (right - center);
            let w = rise.min(fall).max(0.0);
            fb[[m, k]] = w * enorm;
        }
    }
    fb
}

/// Slaney-style 80-band mel filterbank over 0-8 kHz, shape `80 x 641`.
pub fn mel_filterbank() -> &'static Array2<f64> {
    static FB: OnceLock<Array2<f64>> = OnceLock::new();
    FB.get_or_init(build_filterbank)
}

pub fn mel_spectrogram(lin: &LinearSpectrogram) -> Result<MelSpectrogram> {
    let fb = mel_filterbank();
    if lin.bins() != fb.ncols() {
        return Err(Error::input(format!(
            "linear spectrogram has {} bins, filterbank expects {}",
            lin.bins(),
            fb.ncols()
        )));
    }
    let mel = lin.values.dot(&fb.t()).mapv(|x| x.max(LOG_FLOOR).ln());
    MelSpectrogram::new(mel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::StftConfig;

    fn lin(values: Array2<f64>) -> LinearSpectrogram {
        LinearSpectrogram {
            values,
            config: StftConfig::default(),
        }
    }

    #[test]
    fn zero_input_gives_log_floor() {
        let mel = mel_spectrogram(&lin(Array2::zeros((20, LINEAR_BINS)))).unwrap();
        assert_eq!(mel.frames(), 20);
        assert!(mel.values.iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn single_bin_lights_exactly_overlapping_filters() {
        let fb = mel_filterbank();
        for bin in [3usize, 40, 200, 600] {
            let mut v = Array2::zeros((1, LINEAR_BINS));
            v[[0, bin]] = 1e6;
            let mel = mel_spectrogram(&lin(v)).unwrap();
            for m in 0..MEL_BINS {
                let lit = mel.values[[0, m]] > LOG_FLOOR.ln();
                assert_eq!(lit, fb[[m, bin]] > 0.0, "bin {bin} mel {m}");
            }
        }
    }

    #[test]
    fn bin_mismatch_rejected() {
        assert!(mel_spectrogram(&lin(Array2::zeros((4, 100)))).is_err());
    }

    #[test]
    fn filterbank_covers_the_band() {
        let fb = mel_filterbank();
        // every filter has support, and the top filter reaches close to 8 kHz
        for m in 0..MEL_BINS {
            assert!(fb.row(m).iter().any(|&w| w > 0.0), "empty filter {m}");
        }
        assert!(fb[[MEL_BINS - 1, LINEAR_BINS - 2]] > 0.0);
    }

    #[test]
    fn mel_scale_round_trip() {
        for f in [0.0, 300.0, 999.0, 1000.0, 4321.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
    }
}
