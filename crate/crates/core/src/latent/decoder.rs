//! Convolutional decoder from latent frames to log-mel frames, with the
//! style embedding added to every hidden layer.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use super::LATENT_DIM;
use crate::encoders::{MEL_NORM_MEAN, MEL_NORM_STD, SPEAKER_DIM};
use crate::error::{Error, Result};
use crate::nn::{prefixed, relu, relu_backward, BlockRef, Conv1d, Linear, Parameters};
use crate::signal::{MelSpectrogram, MEL_BINS};

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub convs: Vec<Conv1d>,
    pub conds: Vec<Linear>,
    pub out: Linear,
}

pub(crate) struct DecoderTrace {
    cols: Vec<Array2<f64>>,
    hs: Vec<Array2<f64>>,
    style: Array1<f64>,
}

const DECODER_LAYERS: usize = 3;

impl Decoder {
    pub fn init<R: Rng>(hidden: usize, rng: &mut R) -> Self {
        let convs = (0..DECODER_LAYERS)
            .map(|i| Conv1d::init(3, if i == 0 { LATENT_DIM } else { hidden }, hidden, rng))
            .collect();
        let conds = (0..DECODER_LAYERS)
            .map(|_| Linear::init_scaled(SPEAKER_DIM, hidden, 1.0, rng))
            .collect();
        Decoder {
            convs,
            conds,
            out: Linear::init(hidden, MEL_BINS, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Decoder {
            convs: self.convs.iter().map(Conv1d::zeros_like).collect(),
            conds: self.conds.iter().map(Linear::zeros_like).collect(),
            out: self.out.zeros_like(),
        }
    }

    /// Output in normalized units; `decode` maps it back to log-mel.
    pub(crate) fn forward_cached(&self, z: ArrayView2<f64>, style: ArrayView1<f64>) -> (Array2<f64>, DecoderTrace) {
        let mut h = z.to_owned();
        let mut cols = Vec::with_capacity(self.convs.len());
        let mut hs = Vec::with_capacity(self.convs.len());
        for (conv, cond) in self.convs.iter().zip(&self.conds) {
            let (pre, c) = conv.forward_cached(h.view());
            h = relu(pre + &cond.forward_vec(style));
            cols.push(c);
            hs.push(h.clone());
        }
        let y = self.out.forward(h.view());
        (
            y,
            DecoderTrace {
                cols,
                hs,
                style: style.to_owned(),
            },
        )
    }

    pub fn decode(&self, z: ArrayView2<f64>, style: ArrayView1<f64>) -> Result<MelSpectrogram> {
        if z.ncols() != LATENT_DIM {
            return Err(Error::input(format!(
                "decoder expects {LATENT_DIM}-d latents, got {}",
                z.ncols()
            )));
        }
        if style.len() != SPEAKER_DIM {
            return Err(Error::input(format!(
                "decoder expects {SPEAKER_DIM}-d style, got {}",
                style.len()
            )));
        }
        if z.nrows() == 0 {
            return Err(Error::input("decoder input has no frames"));
        }
        let (y, _) = self.forward_cached(z, style);
        MelSpectrogram::new(y.mapv(|v| v * MEL_NORM_STD + MEL_NORM_MEAN))
    }

    /// Backpropagates a gradient on the normalized output; returns the
    /// gradient on `z`.
    pub(crate) fn backward(&self, t: &DecoderTrace, dy: ArrayView2<f64>, grad: &mut Decoder) -> Array2<f64> {
        let last = t.hs.last().expect("at least one layer");
        let mut dh = self.out.backward(last.view(), dy, &mut grad.out);
        for i in (0..self.convs.len()).rev() {
            let dpre = relu_backward(t.hs[i].view(), dh);
            let dsum = dpre.sum_axis(Axis(0));
            self.conds[i].backward_vec(t.style.view(), dsum.view(), &mut grad.conds[i]);
            dh = self.convs[i].backward(t.cols[i].view(), dpre.view(), &mut grad.convs[i]);
        }
        dh
    }
}

impl Parameters for Decoder {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        let mut v = Vec::new();
        for (i, (c, k)) in self.convs.iter().zip(&self.conds).enumerate() {
            v.extend(prefixed(&format!("conv{i}"), c.blocks()));
            v.extend(prefixed(&format!("cond{i}"), k.blocks()));
        }
        v.extend(prefixed("out", self.out.blocks()));
        v
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        for (c, k) in self.convs.iter_mut().zip(self.conds.iter_mut()) {
            v.extend(c.blocks_mut());
            v.extend(k.blocks_mut());
        }
        v.extend(self.out.blocks_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frame_count_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Decoder::init(8, &mut rng);
        let z = Array2::from_shape_simple_fn((20, LATENT_DIM), || rng.random_range(-1.0..1.0));
        let s = Array1::from_shape_simple_fn(SPEAKER_DIM, || rng.random_range(-0.1..0.1));
        assert_eq!(d.decode(z.view(), s.view()).unwrap().values.dim(), (20, MEL_BINS));
        assert!(d.decode(z.view(), s.slice(ndarray::s![..3])).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = Decoder::init(6, &mut rng);
        let z = Array2::from_shape_simple_fn((5, LATENT_DIM), || rng.random_range(-1.0..1.0));
        let s = Array1::from_shape_simple_fn(SPEAKER_DIM, || rng.random_range(-0.1..0.1));
        let w = Array2::from_shape_simple_fn((5, MEL_BINS), || rng.random_range(-1.0..1.0));
        let loss = |d: &Decoder, z: &Array2<f64>| (&d.forward_cached(z.view(), s.view()).0 * &w).sum();
        let (_, t) = d.forward_cached(z.view(), s.view());
        let mut grad = d.zeros_like();
        let dz = d.backward(&t, w.view(), &mut grad);
        let h = 1e-6;
        for (i, j) in [(0usize, 0usize), (2, 9), (4, 31)] {
            let mut zp = z.clone();
            zp[[i, j]] += h;
            let mut zm = z.clone();
            zm[[i, j]] -= h;
            let fd = (loss(&d, &zp) - loss(&d, &zm)) / (2.0 * h);
            assert!((fd - dz[[i, j]]).abs() < 1e-6 * fd.abs().max(1.0));
        }
        let analytic: Vec<Vec<f64>> = grad.blocks().iter().map(|b| b.data.to_vec()).collect();
        let names: Vec<String> = d.blocks().iter().map(|b| b.name.clone()).collect();
        for (bi, name) in names.iter().enumerate() {
            for idx in [0usize, 4, 50] {
                if idx >= analytic[bi].len() {
                    continue;
                }
                let mut p = d.clone();
                p.blocks_mut()[bi][idx] += h;
                let mut m = d.clone();
                m.blocks_mut()[bi][idx] -= h;
                let fd = (loss(&p, &z) - loss(&m, &z)) / (2.0 * h);
                let a = analytic[bi][idx];
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
                assert!(rel < 1e-3 || (fd - a).abs() < 1e-9, "{name}[{idx}] fd {fd} vs {a}");
            }
        }
    }
}
