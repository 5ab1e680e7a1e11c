//! Browser demo bindings: a 2-d conditional flow, the chunk-shuffle
//! contrastive loss, and synthetic mels with sample-rate augmentation.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use hybridvc::contrastive::{contrastive_loss, cosine, make_negatives};
use hybridvc::data::{render_utterance, synth_speakers, Content};
use hybridvc::latent::{standard_normal, Flow};
use hybridvc::signal::{sr_augment, waveform_to_mel, MEL_BINS};

/// Points pushed through a randomly initialized 2-channel flow.
#[derive(Debug, Serialize)]
pub struct FlowView {
    /// Standard-normal samples in prior space, `[x, y]` per point.
    pub prior: Vec<[f64; 2]>,
    /// The same points mapped back through the inverse flow.
    pub latent: Vec<[f64; 2]>,
    /// Per-point log |det| of the inverse map.
    pub log_det: Vec<f64>,
}

fn demo_flow(seed: u64) -> Flow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flow = Flow::init(2, 2, 16, 4, &mut rng).expect("two channels is even");
    // output layers start at zero (identity flow); give them weights so the
    // map is visibly non-trivial
    for layer in &mut flow.layers {
        layer.out.weight.mapv_inplace(|_| rng.random_range(-0.6..0.6));
    }
    flow
}

pub fn flow_view(seed: u64, style_x: f64, style_y: f64, points: usize) -> FlowView {
    let flow = demo_flow(seed);
    let u = standard_normal(points, 2, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xF10));
    let cond = Array1::from(vec![style_x, style_y]);
    let out = flow.inverse(u.view(), cond.view()).expect("dims match");
    let pairs = |m: &Array2<f64>| m.rows().into_iter().map(|r| [r[0], r[1]]).collect();
    FlowView {
        prior: pairs(&u),
        latent: pairs(&out.transformed),
        log_det: out.log_det.to_vec(),
    }
}

#[derive(Debug, Serialize)]
pub struct ContrastiveView {
    pub chunks: usize,
    /// Chunk order of each negative.
    pub permutations: Vec<Vec<usize>>,
    pub positive_cosine: f64,
    pub negative_cosines: Vec<f64>,
    pub loss: f64,
    /// Cosine between each negative and the unshuffled text embedding.
    pub negative_vs_text: Vec<f64>,
}

/// `alignment` in [0, 1] blends the audio embedding from random noise
/// towards the text embedding.
pub fn contrastive_view(
    seed: u64,
    dim: usize,
    chunks: usize,
    negatives: usize,
    tau: f64,
    alignment: f64,
) -> Result<ContrastiveView, String> {
    if dim == 0 || chunks < 2 || !dim.is_multiple_of(chunks) {
        return Err(format!(
            "dimension {dim} must split into {chunks} equal chunks (at least 2)"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = standard_normal(1, dim, &mut rng).row(0).to_owned();
    let noise = standard_normal(1, dim, &mut rng).row(0).to_owned();
    let a = alignment.clamp(0.0, 1.0);
    let s = &g * a + &noise * (1.0 - a);
    let negs = make_negatives(g.view(), chunks, negatives, seed).map_err(|e| e.to_string())?;
    let out = contrastive_loss(g.view(), &negs, s.view(), tau).map_err(|e| e.to_string())?;
    Ok(ContrastiveView {
        chunks,
        permutations: negs.permutations.clone(),
        positive_cosine: out.cosines[0],
        negative_cosines: out.cosines[1..].to_vec(),
        loss: out.loss,
        negative_vs_text: negs.negatives.iter().map(|r| cosine(r.view(), g.view())).collect(),
    })
}

#[derive(Debug, Serialize)]
pub struct MelView {
    pub frames: usize,
    pub bins: usize,
    pub base_f0: f64,
    /// Row-major `frames x bins` log-mel.
    pub original: Vec<f64>,
    pub augmented: Vec<f64>,
}

pub fn mel_view(seed: u64, speaker: usize, content: usize, ratio: f64) -> Result<MelView, String> {
    let speakers = synth_speakers(16, seed);
    let spk = speakers
        .get(speaker)
        .ok_or_else(|| format!("speaker index {speaker} out of range 0..16"))?;
    let wave = render_utterance(spk, &Content::generate(seed, content), seed ^ content as u64);
    let mel = waveform_to_mel(&wave).map_err(|e| e.to_string())?;
    let aug = sr_augment(&mel, ratio).map_err(|e| e.to_string())?;
    Ok(MelView {
        frames: mel.frames(),
        bins: MEL_BINS,
        base_f0: spk.base_f0,
        original: mel.values.iter().copied().collect(),
        augmented: aug.values.iter().copied().collect(),
    })
}

fn to_js<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("view serializes")
}

#[wasm_bindgen(js_name = flowView)]
pub fn flow_view_js(seed: u32, style_x: f64, style_y: f64, points: u32) -> String {
    to_js(&flow_view(seed as u64, style_x, style_y, points as usize))
}

#[wasm_bindgen(js_name = contrastiveView)]
pub fn contrastive_view_js(
    seed: u32,
    dim: u32,
    chunks: u32,
    negatives: u32,
    tau: f64,
    alignment: f64,
) -> Result<String, JsValue> {
    contrastive_view(
        seed as u64,
        dim as usize,
        chunks as usize,
        negatives as usize,
        tau,
        alignment,
    )
    .map(|v| to_js(&v))
    .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = melView)]
pub fn mel_view_js(seed: u32, speaker: u32, content: u32, ratio: f64) -> Result<String, JsValue> {
    mel_view(seed as u64, speaker as usize, content as usize, ratio)
        .map(|v| to_js(&v))
        .map_err(|e| JsValue::from_str(&e))
}
