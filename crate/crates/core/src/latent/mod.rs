//! The variational backbone and flow prior: posterior encoder, decoder,
//! style-conditioned flow, content prior and the KL objective, plus the
//! stage-one backbone pretraining.

mod decoder;
mod flow;
mod posterior;
mod prior;

pub use decoder::Decoder;
pub use flow::{CouplingLayer, Flow, FlowOutput, FLOW_LAYERS, LOG_SCALE_BOUND};
pub use posterior::{standard_normal, LatentPosterior, PosteriorEncoder};
pub use prior::{kl_loss, kl_with_grad, KlGrad, PriorProjection, PriorStats};

use ndarray::{s, Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Split};
use crate::encoders::{SpeakerEncoder, MEL_NORM_MEAN, MEL_NORM_STD};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, prefixed, Adam, BlockRef, Parameters};
use crate::rng::stream;

pub const LATENT_DIM: usize = 32;
pub const LOG_SIGMA_MIN: f64 = -7.0;
pub const LOG_SIGMA_MAX: f64 = 5.0;

/// Posterior encoder and decoder, pretrained together and frozen afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub posterior: PosteriorEncoder,
    pub decoder: Decoder,
}

impl Backbone {
    pub fn init<R: Rng>(hidden: usize, rng: &mut R) -> Self {
        Backbone {
            posterior: PosteriorEncoder::init(hidden, rng),
            decoder: Decoder::init(hidden, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Backbone {
            posterior: self.posterior.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }

    /// Reconstruction L1 (log-mel units) of decoding a posterior sample.
    pub fn reconstruction_l1(&self, lin: &Array2<f64>, mel: &Array2<f64>, s: &Array1<f64>, seed: u64) -> Result<f64> {
        let post = self.posterior.encode(lin.view(), s.view(), seed)?;
        let rec = self.decoder.decode(post.z.view(), s.view())?;
        Ok((&rec.values - mel).mapv(f64::abs).mean().unwrap_or(0.0))
    }
}

impl Parameters for Backbone {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        let mut v = prefixed("posterior", self.posterior.blocks());
        v.extend(prefixed("decoder", self.decoder.blocks()));
        v
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.posterior.blocks_mut();
        v.extend(self.decoder.blocks_mut());
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub segment_frames: usize,
    pub lr: f64,
    /// Weight of the KL-to-standard-normal term.
    pub beta: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            hidden: 96,
            steps: 2000,
            batch_size: 16,
            segment_frames: 32,
            lr: 3e-3,
            beta: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneReport {
    pub final_loss: f64,
    pub final_l1: f64,
    /// Mean reconstruction L1 over validation utterances.
    pub val_l1: f64,
}

/// Trains posterior encoder and decoder on random segments with
/// `L1(mel) + beta * KL(q || N(0, I))`, styles from the frozen speaker
/// encoder.
pub fn pretrain_backbone(
    corpus: &Corpus,
    speaker: &SpeakerEncoder,
    config: &BackboneConfig,
) -> Result<(Backbone, BackboneReport)> {
    if !speaker.trained {
        return Err(Error::State(
            "backbone pretraining needs a pretrained speaker encoder".into(),
        ));
    }
    let train = corpus.split(Split::Train);
    if train.is_empty() {
        return Err(Error::input("manifest has no training utterances"));
    }
    let styles: Vec<Array1<f64>> = corpus
        .utterances
        .iter()
        .map(|u| speaker.encode(&u.mel).map(|e| e.vector))
        .collect::<Result<_>>()?;
    let index_of = |u: &crate::data::Utterance| {
        corpus
            .utterances
            .iter()
            .position(|v| std::ptr::eq(v, u))
            .expect("utterance from this corpus")
    };
    let train_idx: Vec<usize> = train.iter().map(|u| index_of(u)).collect();

    let mut rng = stream(config.seed, &[0xBAC0]);
    let mut model = Backbone::init(config.hidden, &mut rng);
    let mut adam = Adam::new(&model, 0.9, 0.98, 1e-9);
    let (mut last_loss, mut last_l1) = (f64::NAN, f64::NAN);
    for step in 0..config.steps {
        let mut srng = stream(config.seed, &[0xBAC1, step as u64]);
        let mut grad = model.zeros_like();
        let (mut loss_sum, mut l1_sum) = (0.0, 0.0);
        for _ in 0..config.batch_size {
            let ui = train_idx[srng.random_range(0..train_idx.len())];
            let u = &corpus.utterances[ui];
            let frames = u.mel.frames();
            let len = config.segment_frames.min(frames);
            let start = srng.random_range(0..=frames - len);
            let lin = u.lin.values.slice(s![start..start + len, ..]);
            let mel = u.mel.values.slice(s![start..start + len, ..]);
            let style = &styles[ui];

            let (mu, ls, ptrace) = model.posterior.forward_cached(lin, style.view());
            let noise = standard_normal(len, LATENT_DIM, &mut srng);
            let z = &mu + &(ls.mapv(f64::exp) * &noise);
            let (y, dtrace) = model.decoder.forward_cached(z.view(), style.view());
            let target = mel.mapv(|v| (v - MEL_NORM_MEAN) / MEL_NORM_STD);
            let n = y.len() as f64;
            let diff = &y - &target;
            let l1 = diff.mapv(f64::abs).sum() / n * MEL_NORM_STD;
            let dy = diff.mapv(|d| d.signum() * MEL_NORM_STD / n);
            let (kl, dmu_kl, dls_kl) = prior::kl_standard_normal(mu.view(), ls.view());
            let dz = model.decoder.backward(&dtrace, dy.view(), &mut grad.decoder);
            let dmu = &dz + &(dmu_kl * config.beta);
            let dls = &dz * &noise * &ls.mapv(f64::exp) + &(dls_kl * config.beta);
            model
                .posterior
                .backward(&ptrace, dmu.view(), dls.view(), &mut grad.posterior);
            loss_sum += l1 + config.beta * kl;
            l1_sum += l1;
        }
        let b = config.batch_size as f64;
        grad.scale(1.0 / b);
        last_loss = loss_sum / b;
        last_l1 = l1_sum / b;
        if !last_loss.is_finite() {
            return Err(Error::Numeric(format!("backbone loss is not finite at step {step}")));
        }
        clip_grad_norm(&mut grad, 5.0);
        let lr = config.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / config.steps as f64).cos());
        adam.update(&mut model, &grad, lr);
    }
    let val = corpus.split(Split::Val);
    let mut val_l1 = 0.0;
    for (i, u) in val.iter().enumerate() {
        let ui = index_of(u);
        val_l1 += model.reconstruction_l1(&u.lin.values, &u.mel.values, &styles[ui], config.seed ^ i as u64)?;
    }
    if !val.is_empty() {
        val_l1 /= val.len() as f64;
    }
    Ok((
        model,
        BackboneReport {
            final_loss: last_loss,
            final_l1: last_l1,
            val_l1,
        },
    ))
}
