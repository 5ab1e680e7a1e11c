//! Conversion: content of the source, prior sample, inverse flow and decoder
//! under the prompt's style embedding, plus Griffin-Lim resynthesis and the
//! mel file format.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rustfft::num_complex::Complex64;

use crate::checkpoint::ParamFile;
use crate::error::{Error, Result};
use crate::latent::{standard_normal, LATENT_DIM};
use crate::rng::stream;
use crate::signal::{
    istft, mel_filterbank, stft_complex, waveform_to_mel, MelSpectrogram, StftConfig, Waveform, HOP_LENGTH, MEL_BINS,
    SAMPLE_RATE,
};
use crate::training::{Checkpoint, HybridModel, StyleEmbedding};

pub const DEFAULT_TEMPERATURE: f64 = 0.667;
pub const GRIFFIN_LIM_ITERATIONS: usize = 60;

#[derive(Debug, Clone, PartialEq)]
pub enum Prompt {
    Audio(Waveform),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConversionRequest {
    pub source: Waveform,
    pub prompt: Prompt,
    pub seed: u64,
    /// Multiplier on the prior standard deviation; 0 uses the prior mean.
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConversionResult {
    pub mel: MelSpectrogram,
    /// Prior sample before the inverse flow.
    pub prior_sample: Array2<f64>,
    /// Latent fed to the decoder.
    pub latent: Array2<f64>,
    pub prompt_embedding: Array1<f64>,
}

impl HybridModel {
    pub fn style_for(&self, prompt: &Prompt) -> Result<StyleEmbedding> {
        match prompt {
            Prompt::Audio(w) => self.style_from_audio(&waveform_to_mel(w)?),
            Prompt::Text(t) => self.style_from_text(t),
        }
    }

    /// Converts a source mel under `style`.
    pub fn convert_mel(
        &self,
        source: &MelSpectrogram,
        style: &StyleEmbedding,
        seed: u64,
        temperature: f64,
    ) -> Result<ConversionResult> {
        if !(0.0..=1.0).contains(&temperature) {
            return Err(Error::input(format!(
                "temperature must lie in [0, 1], got {temperature}"
            )));
        }
        let c = self.content(source)?;
        let prior = self.prior_stats(c.view())?;
        let prior_sample = if temperature == 0.0 {
            prior.mu_theta.clone()
        } else {
            let eps = standard_normal(c.nrows(), LATENT_DIM, &mut stream(seed, &[0x1AFE]));
            &prior.mu_theta + &(prior.log_sigma_theta.mapv(|v| v.exp() * temperature) * &eps)
        };
        let g = style.0.view();
        let latent = self.trainable.flow.inverse(prior_sample.view(), g)?.transformed;
        let mel = self.backbone.decoder.decode(latent.view(), g)?;
        Ok(ConversionResult {
            mel,
            prior_sample,
            latent,
            prompt_embedding: style.0.clone(),
        })
    }
}

pub fn convert(req: &ConversionRequest, ckpt: &Checkpoint) -> Result<ConversionResult> {
    if !ckpt.is_trained() {
        return Err(Error::State("checkpoint has not been through hybrid training".into()));
    }
    if let Prompt::Text(t) = &req.prompt {
        if t.trim().is_empty() {
            return Err(Error::input("text prompt is empty"));
        }
    }
    let style = ckpt.model.style_for(&req.prompt)?;
    let source = waveform_to_mel(&req.source)?;
    ckpt.model.convert_mel(&source, &style, req.seed, req.temperature)
}

fn mel_pseudo_inverse() -> &'static Array2<f64> {
    static PINV: OnceLock<Array2<f64>> = OnceLock::new();
    PINV.get_or_init(|| {
        let fb = mel_filterbank();
        let m = DMatrix::from_fn(fb.nrows(), fb.ncols(), |i, j| fb[[i, j]]);
        let p = m.pseudo_inverse(1e-10).expect("SVD of the filterbank converges");
        // stored as mel x linear so that lin = mel_mag . pinv
        Array2::from_shape_fn((fb.nrows(), fb.ncols()), |(i, j)| p[(j, i)])
    })
}

/// Least-squares linear magnitude for a log-mel spectrogram, clipped at 0.
pub fn mel_to_linear(mel: &MelSpectrogram) -> Array2<f64> {
    mel.values.mapv(f64::exp).dot(mel_pseudo_inverse()).mapv(|v| v.max(0.0))
}

/// Griffin-Lim phase reconstruction from zero initial phase. Output has
/// `frames * hop` samples.
pub fn griffin_lim(mel: &MelSpectrogram, iterations: usize) -> Result<Waveform> {
    let mag = mel_to_linear(mel);
    let cfg = StftConfig::default();
    let mut spec = mag.mapv(|m| Complex64::new(m, 0.0));
    let mut samples = istft(&spec, &cfg);
    if samples.len() < cfg.win_length {
        return Err(Error::input("mel too short for resynthesis"));
    }
    for _ in 0..iterations {
        let w = Waveform::new(samples, SAMPLE_RATE)?;
        let est = stft_complex(&w, &cfg)?;
        spec = Array2::from_shape_fn(mag.dim(), |(t, k)| {
            let c = est[[t, k]];
            let n = c.norm();
            if n > 1e-12 {
                c * (mag[[t, k]] / n)
            } else {
                Complex64::new(mag[[t, k]], 0.0)
            }
        });
        samples = istft(&spec, &cfg);
    }
    Waveform::new(samples, SAMPLE_RATE)
}

/// Writes a mel spectrogram as a parameter container of kind `mel`.
pub fn write_mel(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    let mut f = ParamFile::new("mel");
    f.set("frames", mel.frames());
    f.set("bins", MEL_BINS);
    f.set("dtype", "f64le");
    f.set("hop_length", HOP_LENGTH);
    f.set("sample_rate", SAMPLE_RATE);
    f.blocks.push(crate::checkpoint::StoredBlock {
        name: "mel".into(),
        shape: vec![mel.frames(), MEL_BINS],
        frozen: false,
        data: mel.values.iter().copied().collect(),
    });
    f.write(path)
}

pub fn read_mel(path: &Path) -> Result<MelSpectrogram> {
    let f = ParamFile::read(path)?;
    if f.kind() != "mel" {
        return Err(Error::input(format!("{} is not a mel file", path.display())));
    }
    let b = f
        .block("mel")
        .ok_or_else(|| Error::input(format!("{} has no mel block", path.display())))?;
    let values =
        Array2::from_shape_vec((b.shape[0], b.shape[1]), b.data.clone()).map_err(|e| Error::input(e.to_string()))?;
    MelSpectrogram::new(values)
}
