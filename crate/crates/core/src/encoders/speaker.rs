//! Utterance-level speaker encoder: two time convolutions, mean and
//! standard-deviation pooling, a linear head, and L2 normalization.
//! Pretrained as a speaker classifier with a cosine-softmax head that is
//! discarded afterwards.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{MEL_NORM_MEAN, MEL_NORM_STD};
use crate::data::{Corpus, Split};
use crate::error::{Error, Result};
use crate::nn::{prefixed, relu, relu_backward, Adam, BlockRef, Conv1d, Linear, Parameters};
use crate::rng::stream;
use crate::signal::{MelSpectrogram, MEL_BINS};

pub const SPEAKER_DIM: usize = 256;
const POOL_EPS: f64 = 1e-5;

/// Unit-norm 256-d style vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub vector: Array1<f64>,
}

impl SpeakerEmbedding {
    pub fn new(vector: Array1<f64>) -> Result<Self> {
        if vector.len() != SPEAKER_DIM {
            return Err(Error::input(format!(
                "speaker embedding must have {SPEAKER_DIM} dims, got {}",
                vector.len()
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite speaker embedding".into()));
        }
        Ok(SpeakerEmbedding { vector })
    }

    pub fn cosine(&self, other: &SpeakerEmbedding) -> f64 {
        crate::contrastive::cosine(self.vector.view(), other.vector.view())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEncoder {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub head: Linear,
    /// False until pretraining finished; untrained encoders refuse to embed.
    pub trained: bool,
}

pub(crate) struct SpeakerCache {
    cols1: Array2<f64>,
    h1: Array2<f64>,
    cols2: Array2<f64>,
    h2: Array2<f64>,
    mean: Array1<f64>,
    std: Array1<f64>,
    pooled: Array1<f64>,
    norm: f64,
    out: Array1<f64>,
}

impl SpeakerEncoder {
    pub fn init<R: Rng>(hidden: usize, rng: &mut R) -> Self {
        SpeakerEncoder {
            conv1: Conv1d::init(3, MEL_BINS, hidden, rng),
            conv2: Conv1d::init(3, hidden, hidden, rng),
            head: Linear::init(2 * hidden, SPEAKER_DIM, rng),
            trained: false,
        }
    }

    pub fn hidden(&self) -> usize {
        self.conv2.output_dim()
    }

    pub fn zeros_like(&self) -> Self {
        SpeakerEncoder {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            head: self.head.zeros_like(),
            trained: false,
        }
    }

    pub(crate) fn forward_cached(&self, mel: &Array2<f64>) -> SpeakerCache {
        let x = mel.mapv(|v| (v - MEL_NORM_MEAN) / MEL_NORM_STD);
        let (pre1, cols1) = self.conv1.forward_cached(x.view());
        let h1 = relu(pre1);
        let (pre2, cols2) = self.conv2.forward_cached(h1.view());
        let h2 = relu(pre2);
        let mean = h2.mean_axis(Axis(0)).expect("at least one frame");
        let var = (&h2 - &mean).mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
        let std = var.mapv(|v| (v + POOL_EPS).sqrt());
        let pooled = concatenate![Axis(0), mean, std];
        let raw = self.head.forward_vec(pooled.view());
        let norm = raw.dot(&raw).sqrt().max(1e-12);
        let out = raw / norm;
        SpeakerCache {
            cols1,
            h1,
            cols2,
            h2,
            mean,
            std,
            pooled,
            norm,
            out,
        }
    }

    pub(crate) fn backward(&self, cache: &SpeakerCache, ds: ArrayView1<f64>, grad: &mut SpeakerEncoder) {
        let s = &cache.out;
        let de = (&ds - &(s * s.dot(&ds))) / cache.norm;
        let dpooled = self.head.backward_vec(cache.pooled.view(), de.view(), &mut grad.head);
        let c = self.hidden();
        let frames = cache.h2.nrows() as f64;
        let dmean = dpooled.slice(s![..c]);
        let dstd = dpooled.slice(s![c..]);
        let coef = &dstd / &(&cache.std * frames);
        let dh2 = (&cache.h2 - &cache.mean) * &coef + &(&dmean / frames);
        let dpre2 = relu_backward(cache.h2.view(), dh2);
        let dh1 = self.conv2.backward(cache.cols2.view(), dpre2.view(), &mut grad.conv2);
        let dpre1 = relu_backward(cache.h1.view(), dh1);
        self.conv1
            .backward_params(cache.cols1.view(), dpre1.view(), &mut grad.conv1);
    }

    /// Embedding without the trained-state check.
    pub(crate) fn embed_raw(&self, mel: &Array2<f64>) -> Array1<f64> {
        self.forward_cached(mel).out
    }

    pub fn encode(&self, mel: &MelSpectrogram) -> Result<SpeakerEmbedding> {
        if !self.trained {
            return Err(Error::State("speaker encoder has not been pretrained".into()));
        }
        SpeakerEmbedding::new(self.embed_raw(&mel.values))
    }
}

impl Parameters for SpeakerEncoder {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        let mut v = prefixed("conv1", self.conv1.blocks());
        v.extend(prefixed("conv2", self.conv2.blocks()));
        v.extend(prefixed("head", self.head.blocks()));
        v
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.conv1.blocks_mut();
        v.extend(self.conv2.blocks_mut());
        v.extend(self.head.blocks_mut());
        v
    }
}

/// Cosine-softmax classifier used only during pretraining.
#[derive(Debug, Clone)]
struct CosineHead {
    weight: Array2<f64>,
    scale: f64,
}

impl CosineHead {
    /// Cross-entropy loss for `label` with `margin` taken off the target
    /// cosine, gradient w.r.t. the embedding, and whether the plain argmax
    /// was correct. Accumulates the weight gradient.
    fn loss(&self, s: ArrayView1<f64>, label: usize, margin: f64, grad: &mut Array2<f64>) -> (f64, Array1<f64>, bool) {
        let n = self.weight.ncols();
        let norms: Vec<f64> = (0..n)
            .map(|j| self.weight.column(j).dot(&self.weight.column(j)).sqrt().max(1e-12))
            .collect();
        let cos: Vec<f64> = (0..n).map(|j| self.weight.column(j).dot(&s) / norms[j]).collect();
        let correct = cos.iter().enumerate().all(|(j, &c)| j == label || c < cos[label]);
        let logits: Vec<f64> = cos
            .iter()
            .enumerate()
            .map(|(j, c)| (c - if j == label { margin } else { 0.0 }) * self.scale)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let loss = max + z.ln() - logits[label];
        let mut ds = Array1::zeros(s.len());
        for j in 0..n {
            let p = (logits[j] - max).exp() / z;
            let dl = (p - if j == label { 1.0 } else { 0.0 }) * self.scale;
            let w = self.weight.column(j);
            ds.scaled_add(dl / norms[j], &w);
            // d cos / d w = (s - cos * w_hat) / |w|
            let mut gcol = grad.column_mut(j);
            gcol.scaled_add(dl / norms[j], &s);
            gcol.scaled_add(-dl * cos[j] / (norms[j] * norms[j]), &w);
        }
        (loss, ds, correct)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeakerPretrainConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Training crops are drawn with lengths in `min_crop_frames..=crop_frames`.
    pub min_crop_frames: usize,
    pub crop_frames: usize,
    pub logit_scale: f64,
    /// Additive cosine margin on the target class.
    pub margin: f64,
    pub seed: u64,
}

impl Default for SpeakerPretrainConfig {
    fn default() -> Self {
        SpeakerPretrainConfig {
            hidden: 64,
            steps: 600,
            batch_size: 16,
            lr: 2e-3,
            min_crop_frames: 64,
            crop_frames: 64,
            logit_scale: 12.0,
            margin: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerPretrainReport {
    /// Classification accuracy on the full-length training utterances.
    pub train_accuracy: f64,
    pub final_loss: f64,
    pub speakers: usize,
}

/// Trains the speaker encoder as a classifier over the corpus speakers and
/// returns the frozen encoder (the classification head is dropped).
pub fn pretrain_speaker_encoder(
    corpus: &Corpus,
    config: &SpeakerPretrainConfig,
) -> Result<(SpeakerEncoder, SpeakerPretrainReport)> {
    let counts = corpus.utterances_per_speaker();
    if counts.len() < 8 {
        return Err(Error::input(format!(
            "speaker pretraining needs at least 8 speakers, manifest has {}",
            counts.len()
        )));
    }
    if let Some((spk, n)) = counts.iter().find(|(_, &n)| n < 10) {
        return Err(Error::input(format!(
            "speaker {} has {n} utterances, at least 10 required",
            corpus.speakers[*spk]
        )));
    }
    if config.min_crop_frames == 0 || config.min_crop_frames > config.crop_frames {
        return Err(Error::Config(format!(
            "speaker crop lengths {}..={} are not a valid range",
            config.min_crop_frames, config.crop_frames
        )));
    }
    let train = corpus.split(Split::Train);
    if train.is_empty() {
        return Err(Error::input("manifest has no training utterances"));
    }
    let n_spk = corpus.speakers.len();
    let mut rng = stream(config.seed, &[0x5E0C]);
    let mut enc = SpeakerEncoder::init(config.hidden, &mut rng);
    let mut head = CosineHead {
        weight: Array2::from_shape_simple_fn((SPEAKER_DIM, n_spk), || rng.random_range(-1.0..1.0)),
        scale: config.logit_scale,
    };
    let mut adam = Adam::new(&enc, 0.9, 0.999, 1e-8);
    let mut head_m = Array2::<f64>::zeros(head.weight.dim());
    let mut head_v = Array2::<f64>::zeros(head.weight.dim());
    let mut last_loss = f64::NAN;
    for step in 0..config.steps {
        let mut srng = stream(config.seed, &[0x5E0D, step as u64]);
        let mut grad = enc.zeros_like();
        let mut head_grad = Array2::zeros(head.weight.dim());
        let mut loss = 0.0;
        for _ in 0..config.batch_size {
            let u = train[srng.random_range(0..train.len())];
            let frames = u.mel.frames();
            let len = if config.min_crop_frames < config.crop_frames {
                srng.random_range(config.min_crop_frames..=config.crop_frames)
            } else {
                config.crop_frames
            }
            .min(frames);
            let start = srng.random_range(0..=frames - len);
            let crop = u.mel.values.slice(s![start..start + len, ..]).to_owned();
            let cache = enc.forward_cached(&crop);
            let (l, ds, _) = head.loss(cache.out.view(), u.speaker, config.margin, &mut head_grad);
            enc.backward(&cache, ds.view(), &mut grad);
            loss += l;
        }
        let scale = 1.0 / config.batch_size as f64;
        grad.scale(scale);
        head_grad *= scale;
        last_loss = loss * scale;
        if !last_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "speaker pretraining loss diverged at step {step}"
            )));
        }
        adam.update(&mut enc, &grad, config.lr);
        // plain Adam on the throwaway head
        let t = (step + 1) as i32;
        head_m = &head_m * 0.9 + &(&head_grad * 0.1);
        head_v = &head_v * 0.999 + &(head_grad.mapv(|g| g * g) * 0.001);
        let mhat = &head_m / (1.0 - 0.9f64.powi(t));
        let vhat = &head_v / (1.0 - 0.999f64.powi(t));
        head.weight = &head.weight - &(mhat / (vhat.mapv(f64::sqrt) + 1e-8) * config.lr);
    }
    let mut correct = 0usize;
    let mut scratch = Array2::zeros(head.weight.dim());
    for u in &train {
        let s = enc.embed_raw(&u.mel.values);
        if head.loss(s.view(), u.speaker, 0.0, &mut scratch).2 {
            correct += 1;
        }
    }
    enc.trained = true;
    let report = SpeakerPretrainReport {
        train_accuracy: correct as f64 / train.len() as f64,
        final_loss: last_loss,
        speakers: n_spk,
    };
    Ok((enc, report))
}
