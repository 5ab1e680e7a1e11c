use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{prefixed, BlockRef, Linear, Parameters};
use crate::signal::{MelSpectrogram, MEL_BINS};

/// Cepstral coefficients kept per frame (indices 1..=20).
pub const DCT_COEFFS: usize = 20;
pub const CONTENT_DIM: usize = 3 * DCT_COEFFS;
pub const BOTTLENECK_DIM: usize = 32;

/// Per-frame content descriptors: orthonormal DCT-II coefficients 1..=20
/// of the log-mel frame (coefficient 0, the overall level, is dropped),
/// followed by their first and second temporal differences. Output is
/// `frames x 60`.
pub fn content_extract(mel: &MelSpectrogram) -> Array2<f64> {
    let n = MEL_BINS;
    let basis = Array2::from_shape_fn((n, DCT_COEFFS), |(i, k)| {
        let k = k + 1;
        (2.0 / n as f64).sqrt() * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos()
    });
    let cep = mel.values.dot(&basis);
    let frames = cep.nrows();
    let mut out = Array2::zeros((frames, CONTENT_DIM));
    for t in 0..frames {
        let prev = t.saturating_sub(1);
        let next = (t + 1).min(frames - 1);
        for k in 0..DCT_COEFFS {
            let (a, b, c) = (cep[[prev, k]], cep[[t, k]], cep[[next, k]]);
            out[[t, k]] = b;
            out[[t, DCT_COEFFS + k]] = 0.5 * (c - a);
            out[[t, 2 * DCT_COEFFS + k]] = c - 2.0 * b + a;
        }
    }
    out
}

/// Trainable per-frame projection 60 -> 32.
#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck {
    pub linear: Linear,
}

impl Bottleneck {
    pub fn init<R: Rng>(rng: &mut R) -> Self {
        // cepstral inputs are O(10), keep the initial projection small
        Bottleneck {
            linear: Linear::init_scaled(CONTENT_DIM, BOTTLENECK_DIM, 0.2, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Bottleneck {
            linear: self.linear.zeros_like(),
        }
    }

    pub fn project(&self, raw: ArrayView2<f64>) -> Result<Array2<f64>> {
        if raw.ncols() != CONTENT_DIM {
            return Err(Error::input(format!(
                "content features have {} dims, expected {CONTENT_DIM}",
                raw.ncols()
            )));
        }
        Ok(self.linear.forward(raw))
    }
}

impl Parameters for Bottleneck {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        prefixed("linear", self.linear.blocks())
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.linear.blocks_mut()
    }
}
