//! Prompt text encoder over a closed template vocabulary: bag-of-words
//! embedding, a two-layer MLP to the 512-d raw embedding and a linear
//! projection to the 256-d space shared with speaker embeddings.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::data::TEMPLATE_WORDS;
use crate::error::{Error, Result};
use crate::nn::{block2, prefixed, BlockRef, Linear, Parameters};

pub const TEXT_RAW_DIM: usize = 512;
pub const TEXT_PROJ_DIM: usize = 256;
const TOKEN_DIM: usize = 64;
const MLP_HIDDEN: usize = 128;
pub const OOV: &str = "<oov>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub oov_count: usize,
}

impl Vocabulary {
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let words: Vec<String> = words.into_iter().map(Into::into).collect();
        if words.first().map(String::as_str) != Some(OOV) {
            return Err(Error::input(format!("vocabulary must start with {OOV}")));
        }
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::input(format!(
                    "invalid vocabulary token {w:?} at line {}",
                    i + 1
                )));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::input(format!("duplicate vocabulary token {w:?}")));
            }
        }
        Ok(Vocabulary { words, index })
    }

    /// OOV followed by every word the prompt templates use.
    pub fn template() -> Self {
        Self::from_words(std::iter::once(OOV).chain(TEMPLATE_WORDS.iter().copied())).expect("template words are unique")
    }

    /// One token per line; line index is the id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_words(text.lines().map(str::trim_end).filter(|l| !l.is_empty()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.words.join("\n");
        out.push('\n');
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Lowercases and splits on anything that is not alphanumeric.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut tokens = Vec::new();
        let mut oov_count = 0;
        for word in text
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            match self.index.get(word) {
                Some(&id) => tokens.push(id),
                None => {
                    tokens.push(0);
                    oov_count += 1;
                }
            }
        }
        TokenSequence { tokens, oov_count }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub raw: Array1<f64>,
    pub projected: Array1<f64>,
}

impl TextEmbedding {
    /// The projected embedding scaled to unit length, as used for
    /// conditioning.
    pub fn style(&self) -> Array1<f64> {
        let n = self.projected.dot(&self.projected).sqrt().max(1e-12);
        &self.projected / n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub vocab: Vocabulary,
    /// `vocab.len() x TOKEN_DIM`.
    pub embedding: Array2<f64>,
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub proj: Linear,
}

pub(crate) struct TextCache {
    counts: Array1<f64>,
    pooled: Array1<f64>,
    h: Array1<f64>,
    pub(crate) embedding: TextEmbedding,
}

impl TextEncoder {
    pub fn init<R: Rng>(vocab: Vocabulary, rng: &mut R) -> Self {
        let embedding = Array2::from_shape_simple_fn((vocab.len(), TOKEN_DIM), || rng.random_range(-1.0..1.0));
        TextEncoder {
            vocab,
            embedding,
            mlp1: Linear::init_scaled(TOKEN_DIM, MLP_HIDDEN, 2f64.sqrt(), rng),
            mlp2: Linear::init(MLP_HIDDEN, TEXT_RAW_DIM, rng),
            proj: Linear::init(TEXT_RAW_DIM, TEXT_PROJ_DIM, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        TextEncoder {
            vocab: self.vocab.clone(),
            embedding: Array2::zeros(self.embedding.dim()),
            mlp1: self.mlp1.zeros_like(),
            mlp2: self.mlp2.zeros_like(),
            proj: self.proj.zeros_like(),
        }
    }

    pub(crate) fn forward_tokens(&self, seq: &TokenSequence) -> Result<TextCache> {
        if seq.tokens.is_empty() {
            return Err(Error::input("prompt contains no words"));
        }
        let mut counts = Array1::zeros(self.vocab.len());
        for &t in &seq.tokens {
            if t >= self.vocab.len() {
                return Err(Error::input(format!("token id {t} outside vocabulary")));
            }
            counts[t] += 1.0;
        }
        counts /= seq.tokens.len() as f64;
        let pooled = counts.dot(&self.embedding);
        let h = self.mlp1.forward_vec(pooled.view()).mapv(|v| v.max(0.0));
        let raw = self.mlp2.forward_vec(h.view());
        let projected = self.proj.forward_vec(raw.view());
        Ok(TextCache {
            counts,
            pooled,
            h,
            embedding: TextEmbedding { raw, projected },
        })
    }

    pub(crate) fn forward_cached(&self, prompt: &str) -> Result<TextCache> {
        if prompt.trim().is_empty() {
            return Err(Error::input("prompt is empty"));
        }
        self.forward_tokens(&self.vocab.tokenize(prompt))
    }

    pub fn encode(&self, prompt: &str) -> Result<TextEmbedding> {
        let e = self.forward_cached(prompt)?.embedding;
        if e.raw.iter().chain(e.projected.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite text embedding".into()));
        }
        Ok(e)
    }

    /// Backpropagates gradients on the projected and (optionally) raw
    /// outputs into `grad`.
    pub(crate) fn backward(
        &self,
        cache: &TextCache,
        dprojected: ArrayView1<f64>,
        draw: Option<ArrayView1<f64>>,
        grad: &mut TextEncoder,
    ) {
        let e = &cache.embedding;
        let mut dr = self.proj.backward_vec(e.raw.view(), dprojected, &mut grad.proj);
        if let Some(d) = draw {
            dr += &d;
        }
        let mut dh = self.mlp2.backward_vec(cache.h.view(), dr.view(), &mut grad.mlp2);
        dh.zip_mut_with(&cache.h, |d, &h| {
            if h <= 0.0 {
                *d = 0.0
            }
        });
        let dpooled = self.mlp1.backward_vec(cache.pooled.view(), dh.view(), &mut grad.mlp1);
        for (t, &c) in cache.counts.iter().enumerate() {
            if c != 0.0 {
                grad.embedding.row_mut(t).scaled_add(c, &dpooled);
            }
        }
    }
}

impl Parameters for TextEncoder {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        let mut v = vec![block2("embedding", &self.embedding)];
        v.extend(prefixed("mlp1", self.mlp1.blocks()));
        v.extend(prefixed("mlp2", self.mlp2.blocks()));
        v.extend(prefixed("proj", self.proj.blocks()));
        v
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = vec![self.embedding.as_slice_mut().expect("standard layout")];
        v.extend(self.mlp1.blocks_mut());
        v.extend(self.mlp2.blocks_mut());
        v.extend(self.proj.blocks_mut());
        v
    }
}
