//! Content-conditioned Gaussian prior statistics and the flow-prior KL term.

use ndarray::{s, Array1, Array2, ArrayView2};

use super::flow::FlowOutput;
use super::posterior::LatentPosterior;
use super::{LATENT_DIM, LOG_SIGMA_MAX, LOG_SIGMA_MIN};
use crate::encoders::BOTTLENECK_DIM;
use crate::error::{Error, Result};
use crate::nn::{prefixed, BlockRef, Conv1d, Parameters};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq)]
pub struct PriorStats {
    pub mu_theta: Array2<f64>,
    pub log_sigma_theta: Array2<f64>,
}

/// Kernel-3 convolution from bottleneck features to `(mu, log sigma)`,
/// zero-initialized so a fresh prior is the standard normal.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorProjection {
    pub conv: Conv1d,
}

pub(crate) struct PriorTrace {
    cols: Array2<f64>,
    raw_log_sigma: Array2<f64>,
}

impl PriorProjection {
    pub fn zeros() -> Self {
        PriorProjection {
            conv: Conv1d::zeros(3, BOTTLENECK_DIM, 2 * LATENT_DIM),
        }
    }

    pub fn zeros_like(&self) -> Self {
        PriorProjection {
            conv: self.conv.zeros_like(),
        }
    }

    pub(crate) fn forward_cached(&self, c: ArrayView2<f64>) -> Result<(PriorStats, PriorTrace)> {
        if c.ncols() != BOTTLENECK_DIM {
            return Err(Error::input(format!(
                "prior expects {BOTTLENECK_DIM}-d features, got {}",
                c.ncols()
            )));
        }
        let (o, cols) = self.conv.forward_cached(c);
        let mu_theta = o.slice(s![.., ..LATENT_DIM]).to_owned();
        let raw = o.slice(s![.., LATENT_DIM..]).to_owned();
        let log_sigma_theta = raw.mapv(|v| v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX));
        Ok((
            PriorStats {
                mu_theta,
                log_sigma_theta,
            },
            PriorTrace {
                cols,
                raw_log_sigma: raw,
            },
        ))
    }

    pub fn stats(&self, c: ArrayView2<f64>) -> Result<PriorStats> {
        Ok(self.forward_cached(c)?.0)
    }

    /// Returns the gradient on the bottleneck features.
    pub(crate) fn backward(
        &self,
        t: &PriorTrace,
        dmu: ArrayView2<f64>,
        dlog_sigma: ArrayView2<f64>,
        grad: &mut PriorProjection,
    ) -> Array2<f64> {
        let mut d_o = Array2::zeros((dmu.nrows(), 2 * LATENT_DIM));
        d_o.slice_mut(s![.., ..LATENT_DIM]).assign(&dmu);
        let mut dls = dlog_sigma.to_owned();
        dls.zip_mut_with(&t.raw_log_sigma, |d, &r| {
            if !(LOG_SIGMA_MIN..=LOG_SIGMA_MAX).contains(&r) {
                *d = 0.0
            }
        });
        d_o.slice_mut(s![.., LATENT_DIM..]).assign(&dls);
        self.conv.backward(t.cols.view(), d_o.view(), &mut grad.conv)
    }
}

impl Parameters for PriorProjection {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        prefixed("conv", self.conv.blocks())
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.conv.blocks_mut()
    }
}

/// Gradients of [`kl_loss`] w.r.t. the flow output, its log-det and the
/// prior statistics. The posterior side is treated as constant.
#[derive(Debug, Clone, PartialEq)]
pub struct KlGrad {
    pub d_transformed: Array2<f64>,
    pub d_log_det: Array1<f64>,
    pub d_mu_theta: Array2<f64>,
    pub d_log_sigma_theta: Array2<f64>,
}

fn check_shapes(post: &LatentPosterior, prior: &PriorStats, flow: &FlowOutput) -> Result<()> {
    let d = post.z.dim();
    if prior.mu_theta.dim() != d
        || prior.log_sigma_theta.dim() != d
        || flow.transformed.dim() != d
        || flow.log_det.len() != d.0
    {
        return Err(Error::input(format!(
            "kl shape mismatch: posterior {:?}, prior {:?}, flow {:?}/{}",
            d,
            prior.mu_theta.dim(),
            flow.transformed.dim(),
            flow.log_det.len()
        )));
    }
    if d.0 == 0 {
        return Err(Error::input("kl over zero frames"));
    }
    Ok(())
}

/// Single-sample estimate of `log q(z) - log p(z)` with the flow prior,
/// averaged over frames and latent dims.
pub fn kl_loss(post: &LatentPosterior, prior: &PriorStats, flow: &FlowOutput) -> Result<f64> {
    Ok(kl_with_grad(post, prior, flow)?.0)
}

pub fn kl_with_grad(post: &LatentPosterior, prior: &PriorStats, flow: &FlowOutput) -> Result<(f64, KlGrad)> {
    check_shapes(post, prior, flow)?;
    let (t, d) = post.z.dim();
    let n = (t * d) as f64;
    let log_q: f64 = post
        .log_sigma_q
        .iter()
        .zip(&post.noise)
        .map(|(ls, e)| -HALF_LN_2PI - ls - 0.5 * e * e)
        .sum();
    let inv_var = prior.log_sigma_theta.mapv(|v| (-2.0 * v).exp());
    let diff = &flow.transformed - &prior.mu_theta;
    let sq = &diff * &diff * &inv_var;
    let log_p: f64 = prior
        .log_sigma_theta
        .iter()
        .zip(&sq)
        .map(|(ls, q)| -HALF_LN_2PI - ls - 0.5 * q)
        .sum();
    let value = (log_q - log_p - flow.log_det.sum()) / n;
    let d_transformed = &diff * &inv_var / n;
    let d_mu_theta = -&d_transformed;
    let d_log_sigma_theta = sq.mapv(|q| (1.0 - q) / n);
    let d_log_det = Array1::from_elem(t, -1.0 / n);
    Ok((
        value,
        KlGrad {
            d_transformed,
            d_log_det,
            d_mu_theta,
            d_log_sigma_theta,
        },
    ))
}

/// Closed-form `KL(N(mu, sigma) || N(0, I))` averaged over elements, with
/// gradients on `mu` and `log sigma`.
pub(crate) fn kl_standard_normal(mu: ArrayView2<f64>, log_sigma: ArrayView2<f64>) -> (f64, Array2<f64>, Array2<f64>) {
    let n = mu.len() as f64;
    let var = log_sigma.mapv(|v| (2.0 * v).exp());
    let value = (0.5 * (&mu * &mu + &var - 1.0) - log_sigma).sum() / n;
    let dmu = mu.to_owned() / n;
    let dls = (var - 1.0) / n;
    (value, dmu, dls)
}
