use ndarray::{Array1, Array2, ArrayView2};

use crate::contrastive::Temperature;
use crate::encoders::{content_extract, Bottleneck, SpeakerEncoder, TextEncoder, Vocabulary, SPEAKER_DIM};
use crate::error::{Error, Result};
use crate::latent::{Backbone, Flow, PriorProjection, PriorStats, LATENT_DIM};
use crate::nn::{prefixed, BlockRef, Parameters};
use crate::rng::stream;
use crate::signal::MelSpectrogram;

/// Everything hybrid training updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainable {
    pub bottleneck: Bottleneck,
    pub prior: PriorProjection,
    pub flow: Flow,
    pub text: TextEncoder,
    pub tau: Temperature,
}

impl Trainable {
    pub fn init(seed: u64, flow_hidden: usize, flow_layers: usize, vocab: Vocabulary) -> Result<Self> {
        let mut rng = stream(seed, &[0x7A1B]);
        Ok(Trainable {
            bottleneck: Bottleneck::init(&mut rng),
            prior: PriorProjection::zeros(),
            flow: Flow::init(LATENT_DIM, SPEAKER_DIM, flow_hidden, flow_layers, &mut rng)?,
            text: TextEncoder::init(vocab, &mut rng),
            tau: Temperature::default(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut tau = self.tau;
        tau.blocks_mut()[0][0] = 0.0;
        Trainable {
            bottleneck: self.bottleneck.zeros_like(),
            prior: self.prior.zeros_like(),
            flow: self.flow.zeros_like(),
            text: self.text.zeros_like(),
            tau,
        }
    }
}

impl Parameters for Trainable {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        let mut v = prefixed("bottleneck", self.bottleneck.blocks());
        v.extend(prefixed("prior", self.prior.blocks()));
        v.extend(prefixed("flow", self.flow.blocks()));
        v.extend(prefixed("text", self.text.blocks()));
        v.extend(self.tau.blocks());
        v
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.bottleneck.blocks_mut();
        v.extend(self.prior.blocks_mut());
        v.extend(self.flow.blocks_mut());
        v.extend(self.text.blocks_mut());
        v.extend(self.tau.blocks_mut());
        v
    }
}

/// Frozen encoders and backbone plus the trainable hybrid components.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridModel {
    pub speaker: SpeakerEncoder,
    pub backbone: Backbone,
    pub trainable: Trainable,
}

/// The 256-d embedding that conditions the flow and decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleEmbedding(pub Array1<f64>);

impl HybridModel {
    /// SHA-256 over the frozen speaker encoder and backbone.
    pub fn frozen_digest(&self) -> String {
        format!("{}:{}", self.speaker.digest(), self.backbone.digest())
    }

    pub fn content(&self, mel: &MelSpectrogram) -> Result<Array2<f64>> {
        self.trainable.bottleneck.project(content_extract(mel).view())
    }

    pub fn prior_stats(&self, bottleneck: ArrayView2<f64>) -> Result<PriorStats> {
        self.trainable.prior.stats(bottleneck)
    }

    pub fn style_from_audio(&self, mel: &MelSpectrogram) -> Result<StyleEmbedding> {
        Ok(StyleEmbedding(self.speaker.encode(mel)?.vector))
    }

    /// Unit-normalized projected text embedding.
    pub fn style_from_text(&self, prompt: &str) -> Result<StyleEmbedding> {
        let e = self.trainable.text.encode(prompt)?;
        if e.projected.dot(&e.projected) == 0.0 {
            return Err(Error::Numeric("text embedding has zero norm".into()));
        }
        Ok(StyleEmbedding(e.style()))
    }
}
