use ndarray::Array2;
use rand::Rng;

use super::{MelSpectrogram, MEL_BINS};
use crate::error::{Error, Result};

pub const SR_RATIO_MIN: f64 = 0.85;
pub const SR_RATIO_MAX: f64 = 1.15;

/// Resizes the frequency axis of a mel spectrogram by `ratio`.
///
/// Output bin `k` samples the input at fractional position `k / ratio` with
/// linear interpolation. For `ratio < 1` only the lowest `round(80 * ratio)`
/// bins carry resampled content and the rest of each frame is filled with
/// that frame's minimum; for `ratio > 1` the stretched axis is cropped to 80
/// bins. Frame count is unchanged.
pub fn sr_augment(mel: &MelSpectrogram, ratio: f64) -> Result<MelSpectrogram> {
    if !(SR_RATIO_MIN..=SR_RATIO_MAX).contains(&ratio) {
        return Err(Error::input(format!(
            "resize ratio {ratio} outside [{SR_RATIO_MIN}, {SR_RATIO_MAX}]"
        )));
    }
    let content_bins = if ratio < 1.0 {
        ((MEL_BINS as f64 * ratio).round() as usize).min(MEL_BINS)
    } else {
        MEL_BINS
    };
    let frames = mel.frames();
    let mut out = Array2::zeros((frames, MEL_BINS));
    let last = (MEL_BINS - 1) as f64;
    for (t, row) in mel.values.rows().into_iter().enumerate() {
        let floor = row.iter().copied().fold(f64::INFINITY, f64::min);
        for k in 0..MEL_BINS {
            out[[t, k]] = if k < content_bins {
                let pos = (k as f64 / ratio).min(last);
                let i = pos.floor() as usize;
                let frac = pos - i as f64;
                if frac == 0.0 || i + 1 >= MEL_BINS {
                    row[i]
                } else {
                    row[i] * (1.0 - frac) + row[i + 1] * frac
                }
            } else {
                floor
            };
        }
    }
    MelSpectrogram::new(out)
}

/// Draws a ratio uniformly from `[0.85, 1.15]` and applies [`sr_augment`].
pub fn random_sr_augment<R: Rng>(mel: &MelSpectrogram, rng: &mut R) -> MelSpectrogram {
    let ratio = rng.random_range(SR_RATIO_MIN..=SR_RATIO_MAX);
    sr_augment(mel, ratio).expect("ratio drawn inside the valid range")
}
