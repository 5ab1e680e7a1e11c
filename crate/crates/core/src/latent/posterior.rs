//! Posterior encoder q(z | x_lin, s): per-frame input projection, global
//! style conditioning, two time convolutions and a Gaussian head.

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{LATENT_DIM, LOG_SIGMA_MAX, LOG_SIGMA_MIN};
use crate::encoders::SPEAKER_DIM;
use crate::error::{Error, Result};
use crate::nn::{prefixed, relu, relu_backward, BlockRef, Conv1d, Linear, Parameters};
use crate::rng::stream;
use crate::signal::LINEAR_BINS;

const LIN_NORM_MEAN: f64 = -5.0;
const LIN_NORM_STD: f64 = 2.6;
/// Frames of context each side that the two convolutions see.
pub(crate) const POSTERIOR_CONTEXT: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub mu_q: Array2<f64>,
    pub log_sigma_q: Array2<f64>,
    pub z: Array2<f64>,
    /// The standard-normal draw behind `z`.
    pub noise: Array2<f64>,
}

impl LatentPosterior {
    pub fn from_noise(mu_q: Array2<f64>, log_sigma_q: Array2<f64>, noise: Array2<f64>) -> Result<Self> {
        if mu_q.dim() != log_sigma_q.dim() || mu_q.dim() != noise.dim() {
            return Err(Error::input("posterior statistics and noise differ in shape"));
        }
        let z = &mu_q + &(log_sigma_q.mapv(f64::exp) * &noise);
        Ok(LatentPosterior {
            mu_q,
            log_sigma_q,
            z,
            noise,
        })
    }

    pub fn frames(&self) -> usize {
        self.z.nrows()
    }
}

pub fn standard_normal<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEncoder {
    pub input: Linear,
    pub cond: Linear,
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub out: Linear,
}

pub(crate) struct PosteriorTrace {
    x: Array2<f64>,
    h0: Array2<f64>,
    cols1: Array2<f64>,
    h1: Array2<f64>,
    cols2: Array2<f64>,
    h2: Array2<f64>,
    log_sigma_raw: Array2<f64>,
    s: ndarray::Array1<f64>,
}

pub(crate) fn normalize_linear(lin: ArrayView2<f64>) -> Array2<f64> {
    lin.mapv(|v| (v.max(1e-5).ln() - LIN_NORM_MEAN) / LIN_NORM_STD)
}

impl PosteriorEncoder {
    pub fn init<R: Rng>(hidden: usize, rng: &mut R) -> Self {
        PosteriorEncoder {
            input: Linear::init(LINEAR_BINS, hidden, rng),
            cond: Linear::init_scaled(SPEAKER_DIM, hidden, 0.5, rng),
            conv1: Conv1d::init(3, hidden, hidden, rng),
            conv2: Conv1d::init(3, hidden, hidden, rng),
            out: Linear::init_scaled(hidden, 2 * LATENT_DIM, 0.5, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        PosteriorEncoder {
            input: self.input.zeros_like(),
            cond: self.cond.zeros_like(),
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            out: self.out.zeros_like(),
        }
    }

    fn check(&self, lin: ArrayView2<f64>, s: ArrayView1<f64>) -> Result<()> {
        if lin.ncols() != LINEAR_BINS {
            return Err(Error::input(format!(
                "posterior expects {LINEAR_BINS} bins, got {}",
                lin.ncols()
            )));
        }
        if s.len() != SPEAKER_DIM {
            return Err(Error::input(format!(
                "posterior expects {SPEAKER_DIM}-d style, got {}",
                s.len()
            )));
        }
        if lin.nrows() == 0 {
            return Err(Error::input("posterior input has no frames"));
        }
        Ok(())
    }

    /// Style-independent first projection of the normalized spectrogram;
    /// cacheable per utterance while the encoder is frozen.
    pub(crate) fn project_input(&self, lin: ArrayView2<f64>) -> Array2<f64> {
        self.input.forward(normalize_linear(lin).view())
    }

    /// Mean and clamped log-sigma from a projected input window.
    pub(crate) fn stats_from_projection(
        &self,
        proj: ArrayView2<f64>,
        s: ArrayView1<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let c = self.cond.forward_vec(s);
        let h0 = relu(&proj + &c);
        let h1 = relu(self.conv1.forward(h0.view()));
        let h2 = relu(self.conv2.forward(h1.view()));
        let o = self.out.forward(h2.view());
        let mu = o.slice(s![.., ..LATENT_DIM]).to_owned();
        let ls = o
            .slice(s![.., LATENT_DIM..])
            .mapv(|v| v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX));
        (mu, ls)
    }

    /// Statistics for frames `start..end` of an utterance whose projected
    /// input is `proj`, identical to slicing the full-utterance result.
    pub(crate) fn stats_segment(
        &self,
        proj: ArrayView2<f64>,
        s: ArrayView1<f64>,
        start: usize,
        end: usize,
    ) -> (Array2<f64>, Array2<f64>) {
        let lo = start.saturating_sub(POSTERIOR_CONTEXT);
        let hi = (end + POSTERIOR_CONTEXT).min(proj.nrows());
        let (mu, ls) = self.stats_from_projection(proj.slice(s![lo..hi, ..]), s);
        let a = start - lo;
        let b = a + (end - start);
        (mu.slice(s![a..b, ..]).to_owned(), ls.slice(s![a..b, ..]).to_owned())
    }

    pub fn stats(&self, lin: ArrayView2<f64>, s: ArrayView1<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check(lin, s)?;
        Ok(self.stats_from_projection(self.project_input(lin).view(), s))
    }

    /// Samples `z = mu + sigma * eps` with `eps` drawn from the seeded stream.
    pub fn encode(&self, lin: ArrayView2<f64>, s: ArrayView1<f64>, seed: u64) -> Result<LatentPosterior> {
        let (mu, ls) = self.stats(lin, s)?;
        let noise = standard_normal(mu.nrows(), LATENT_DIM, &mut stream(seed, &[0x9057]));
        LatentPosterior::from_noise(mu, ls, noise)
    }

    pub(crate) fn forward_cached(
        &self,
        lin: ArrayView2<f64>,
        s: ArrayView1<f64>,
    ) -> (Array2<f64>, Array2<f64>, PosteriorTrace) {
        let x = normalize_linear(lin);
        let c = self.cond.forward_vec(s);
        let h0 = relu(self.input.forward(x.view()) + &c);
        let (p1, cols1) = self.conv1.forward_cached(h0.view());
        let h1 = relu(p1);
        let (p2, cols2) = self.conv2.forward_cached(h1.view());
        let h2 = relu(p2);
        let o = self.out.forward(h2.view());
        let mu = o.slice(s![.., ..LATENT_DIM]).to_owned();
        let raw = o.slice(s![.., LATENT_DIM..]).to_owned();
        let ls = raw.mapv(|v| v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX));
        (
            mu,
            ls,
            PosteriorTrace {
                x,
                h0,
                cols1,
                h1,
                cols2,
                h2,
                log_sigma_raw: raw,
                s: s.to_owned(),
            },
        )
    }

    pub(crate) fn backward(
        &self,
        t: &PosteriorTrace,
        dmu: ArrayView2<f64>,
        dlog_sigma: ArrayView2<f64>,
        grad: &mut PosteriorEncoder,
    ) {
        let mut d_o = Array2::zeros((dmu.nrows(), 2 * LATENT_DIM));
        d_o.slice_mut(s![.., ..LATENT_DIM]).assign(&dmu);
        let mut dls = dlog_sigma.to_owned();
        dls.zip_mut_with(&t.log_sigma_raw, |d, &r| {
            if !(LOG_SIGMA_MIN..=LOG_SIGMA_MAX).contains(&r) {
                *d = 0.0
            }
        });
        d_o.slice_mut(s![.., LATENT_DIM..]).assign(&dls);
        let dh2 = self.out.backward(t.h2.view(), d_o.view(), &mut grad.out);
        let dp2 = relu_backward(t.h2.view(), dh2);
        let dh1 = self.conv2.backward(t.cols2.view(), dp2.view(), &mut grad.conv2);
        let dp1 = relu_backward(t.h1.view(), dh1);
        let dh0 = self.conv1.backward(t.cols1.view(), dp1.view(), &mut grad.conv1);
        let dp0 = relu_backward(t.h0.view(), dh0);
        self.input.backward_params(t.x.view(), dp0.view(), &mut grad.input);
        let dsum = dp0.sum_axis(Axis(0));
        self.cond.backward_vec(t.s.view(), dsum.view(), &mut grad.cond);
    }
}

impl Parameters for PosteriorEncoder {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        let mut v = prefixed("input", self.input.blocks());
        v.extend(prefixed("cond", self.cond.blocks()));
        v.extend(prefixed("conv1", self.conv1.blocks()));
        v.extend(prefixed("conv2", self.conv2.blocks()));
        v.extend(prefixed("out", self.out.blocks()));
        v
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.input.blocks_mut();
        v.extend(self.cond.blocks_mut());
        v.extend(self.conv1.blocks_mut());
        v.extend(self.conv2.blocks_mut());
        v.extend(self.out.blocks_mut());
        v
    }
}
