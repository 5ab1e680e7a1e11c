//! Objective metrics: F0 correlation, mel SSIM, Fréchet distance between
//! embedding sets, edit-distance rates, prompt-direction accuracy and
//! text/audio cosine consistency.

mod batch;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{s, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::contrastive::cosine;
use crate::error::{Error, Result};
use crate::signal::{estimate_f0, rms_energy, waveform_to_mel, MelSpectrogram, Waveform};
use crate::training::HybridModel;

pub use batch::{evaluate_pairs, read_pairs, MetricReport, PairMetrics, PairSpec, Summary};

/// Jointly voiced frames needed for a defined F0 correlation.
pub const MIN_COMMON_VOICED: usize = 10;
pub const SSIM_WINDOW: usize = 7;
pub const FRECHET_RIDGE: f64 = 1e-6;

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Pearson correlation of the two F0 tracks over frames voiced in both,
/// compared over the common frame range.
pub fn f0_pcc(src: &Waveform, conv: &Waveform) -> Result<f64> {
    let (a, b) = (estimate_f0(src), estimate_f0(conv));
    let (x, y): (Vec<f64>, Vec<f64>) = (0..a.frames().min(b.frames()))
        .filter(|&t| a.voiced[t] && b.voiced[t])
        .map(|t| (a.f0[t], b.f0[t]))
        .unzip();
    if x.len() < MIN_COMMON_VOICED {
        return Err(Error::UndefinedMetric(format!(
            "f0_pcc needs {MIN_COMMON_VOICED} jointly voiced frames, found {}",
            x.len()
        )));
    }
    pearson(&x, &y).ok_or_else(|| Error::UndefinedMetric("f0 track has zero variance".into()))
}

/// Mean SSIM over sliding 7x7 windows of two log-mel matrices cropped to
/// the shorter one. The dynamic range is taken jointly over both inputs.
pub fn ssim_mel(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64> {
    let frames = a.frames().min(b.frames());
    if frames == 0 {
        return Err(Error::input("ssim_mel: no overlapping frames"));
    }
    ssim(a.values.slice(s![..frames, ..]), b.values.slice(s![..frames, ..]))
}

/// SSIM of two equally shaped images; windows shrink to the image size
/// when a side is shorter than 7.
pub fn ssim(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.dim() != b.dim() || a.is_empty() {
        return Err(Error::input(format!("ssim: shapes {:?} and {:?}", a.dim(), b.dim())));
    }
    let (lo, hi) = a
        .iter()
        .chain(b.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    if range == 0.0 {
        return Ok(1.0);
    }
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let (wr, wc) = (SSIM_WINDOW.min(a.nrows()), SSIM_WINDOW.min(a.ncols()));
    let n = (wr * wc) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=a.nrows() - wr {
        for j in 0..=a.ncols() - wc {
            let pa = a.slice(s![i..i + wr, j..j + wc]);
            let pb = b.slice(s![i..i + wr, j..j + wc]);
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (&x, &y) in pa.iter().zip(pb.iter()) {
                sa += x;
                sb += y;
                saa += x * x;
                sbb += y * y;
                sab += x * y;
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    /// One embedding per row.
    pub vectors: Array2<f64>,
    pub label: String,
}

impl EmbeddingSet {
    pub fn new(vectors: Array2<f64>, label: impl Into<String>) -> Self {
        EmbeddingSet {
            vectors,
            label: label.into(),
        }
    }

    /// Mean and ridge-regularized sample covariance.
    fn moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (m, d) = self.vectors.dim();
        if m < d + 1 {
            return Err(Error::input(format!(
                "embedding set '{}' has {m} vectors of dim {d}; need at least {}",
                self.label,
                d + 1
            )));
        }
        let x = DMatrix::from_fn(m, d, |i, j| self.vectors[[i, j]]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let centered = DMatrix::from_fn(m, d, |i, j| x[(i, j)] - mean[j]);
        let mut cov = centered.transpose() * &centered / (m - 1) as f64;
        for j in 0..d {
            cov[(j, j)] += FRECHET_RIDGE;
        }
        if cov.clone().cholesky().is_none() {
            return Err(Error::Numeric(format!(
                "covariance of '{}' is rank deficient after ridge",
                self.label
            )));
        }
        Ok((mean, cov))
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// ‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^½) between Gaussian fits of the two
/// sets, with Tr (Σa Σb)^½ evaluated as Tr (Σa^½ Σb Σa^½)^½.
pub fn frechet_distance(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    if a.vectors.ncols() != b.vectors.ncols() {
        return Err(Error::input(format!(
            "embedding dims differ: {} vs {}",
            a.vectors.ncols(),
            b.vectors.ncols()
        )));
    }
    let (ma, ca) = a.moments()?;
    let (mb, cb) = b.moments()?;
    let ra = sym_sqrt(&ca);
    let cross = sym_sqrt(&(&ra * &cb * &ra));
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

/// Levenshtein distance with unit costs divided by the reference length.
pub fn edit_distance_rate<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::input("edit distance rate needs a non-empty reference"));
    }
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[hypothesis.len()] as f64 / reference.len() as f64)
}

pub fn word_error_rate(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    edit_distance_rate(&r, &h)
}

pub fn char_error_rate(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    edit_distance_rate(&r, &h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptFactor {
    HigherPitch,
    LowerPitch,
    HigherVolume,
    LowerVolume,
}

impl PromptFactor {
    pub const ALL: [PromptFactor; 4] = [
        PromptFactor::HigherPitch,
        PromptFactor::LowerPitch,
        PromptFactor::HigherVolume,
        PromptFactor::LowerVolume,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptFactor::HigherPitch => "higher_pitch",
            PromptFactor::LowerPitch => "lower_pitch",
            PromptFactor::HigherVolume => "higher_volume",
            PromptFactor::LowerVolume => "lower_volume",
        }
    }

    /// The text prompt used for this factor.
    pub fn prompt(self) -> &'static str {
        match self {
            PromptFactor::HigherPitch => "higher pitch",
            PromptFactor::LowerPitch => "lower pitch",
            PromptFactor::HigherVolume => "higher volume",
            PromptFactor::LowerVolume => "lower volume",
        }
    }

    fn is_pitch(self) -> bool {
        matches!(self, PromptFactor::HigherPitch | PromptFactor::LowerPitch)
    }

    fn is_up(self) -> bool {
        matches!(self, PromptFactor::HigherPitch | PromptFactor::HigherVolume)
    }
}

impl std::str::FromStr for PromptFactor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptFactor::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::input(format!("unknown prompt factor '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTrial {
    pub source: Waveform,
    pub converted: Waveform,
    pub factor: PromptFactor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptAccuracy {
    /// Percentage of counted trials that moved strictly in the prompted direction.
    pub percent: f64,
    pub counted: usize,
    /// Pitch trials dropped because one side had no voiced frames.
    pub excluded: usize,
}

/// Whether the converted statistic moved strictly in the prompted
/// direction; `None` when a pitch trial has no voiced frames.
pub fn prompt_moved(source: &Waveform, converted: &Waveform, factor: PromptFactor) -> Option<bool> {
    let (before, after) = if factor.is_pitch() {
        (
            estimate_f0(source).mean_voiced()?,
            estimate_f0(converted).mean_voiced()?,
        )
    } else {
        (rms_energy(source).mean(), rms_energy(converted).mean())
    };
    Some(if factor.is_up() { after > before } else { after < before })
}

pub fn prompt_accuracy(trials: &[PromptTrial]) -> Result<PromptAccuracy> {
    if trials.is_empty() {
        return Err(Error::input("prompt accuracy needs at least one trial"));
    }
    let outcomes: Vec<Option<bool>> = trials
        .iter()
        .map(|t| prompt_moved(&t.source, &t.converted, t.factor))
        .collect();
    Ok(accuracy_from(&outcomes))
}

pub(crate) fn accuracy_from(outcomes: &[Option<bool>]) -> PromptAccuracy {
    let counted = outcomes.iter().flatten().count();
    let hits = outcomes.iter().flatten().filter(|&&m| m).count();
    PromptAccuracy {
        percent: if counted == 0 {
            0.0
        } else {
            100.0 * hits as f64 / counted as f64
        },
        counted,
        excluded: outcomes.len() - counted,
    }
}

/// Cosine between the projected text embedding of `prompt` and the speaker
/// embedding of `converted`.
pub fn cos_consistency(prompt: &str, converted: &Waveform, model: &HybridModel) -> Result<f64> {
    let g = model.trainable.text.encode(prompt)?.projected;
    let s = model.speaker.embed_raw(&waveform_to_mel(converted)?.values);
    embedding_cosine(g.view(), s.view())
}

/// Cosine similarity that rejects zero-norm vectors.
pub fn embedding_cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::input(format!(
            "embedding dims differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.dot(&a) == 0.0 || b.dot(&b) == 0.0 {
        return Err(Error::input("zero-norm embedding"));
    }
    Ok(cosine(a, b))
}

#[cfg(test)]
mod tests;
