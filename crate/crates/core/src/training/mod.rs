//! Hybrid training: the frozen speaker encoder, content features and
//! backbone feed a KL objective for the flow prior, while the text encoder
//! learns to match speaker embeddings through the contrastive objective.
//! The two are mixed as `(1 - alpha) * kl + alpha * contrastive`.

mod config;
mod model;
mod sweep;

pub use config::TrainConfig;
pub use model::{HybridModel, StyleEmbedding, Trainable};
pub use sweep::{alpha_sweep, write_sweep_csv, write_sweep_svg, SweepResult};

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{put_backbone, put_speaker, take_backbone, take_speaker, ParamFile};
use crate::contrastive::{contrastive_loss, make_negatives_with};
use crate::data::{Corpus, Split};
use crate::encoders::{content_extract, SpeakerEncoder, Vocabulary};
use crate::error::{Error, Result};
use crate::latent::{kl_with_grad, standard_normal, Backbone, LatentPosterior, LATENT_DIM};
use crate::nn::{clip_grad_norm, Adam, Parameters};
use crate::rng::{derive_seed, stream};
use crate::signal::{sr_augment, MelSpectrogram, SR_RATIO_MAX, SR_RATIO_MIN};

pub const LOSS_LOG_HEADER: &str = "step,l_kl,l_contrastive,total,tau";

/// Loss terms for one step, or averaged over one logging interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub l_kl: f64,
    pub l_contrastive: f64,
    pub total: f64,
    pub tau: f64,
}

impl LossBreakdown {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.10e},{:.10e},{:.10e},{:.10e}",
            self.step, self.l_kl, self.l_contrastive, self.total, self.tau
        )
    }
}

/// Running sums for the current logging interval.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct Interval {
    kl: f64,
    contrastive: f64,
    tau: f64,
    count: usize,
}

impl Interval {
    fn add(&mut self, l: &LossBreakdown) {
        self.kl += l.l_kl;
        self.contrastive += l.l_contrastive;
        self.tau += l.tau;
        self.count += 1;
    }

    fn flush(&mut self, step: usize, alpha: f64) -> LossBreakdown {
        let n = self.count.max(1) as f64;
        let (kl, c) = (self.kl / n, self.contrastive / n);
        let row = LossBreakdown {
            step,
            l_kl: kl,
            l_contrastive: c,
            total: (1.0 - alpha) * kl + alpha * c,
            tau: self.tau / n,
        };
        *self = Interval::default();
        row
    }
}

/// A hybrid-training checkpoint: every parameter block, the optimizer
/// state, the config and the step count. Per-step randomness is derived
/// from `(config.seed, step)`, so no generator state is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: HybridModel,
    pub config: TrainConfig,
    pub step: usize,
    pub adam: Adam,
    pub(crate) interval: Interval,
}

fn f64_field(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn parse_f64_field(file: &ParamFile, key: &str) -> Result<f64> {
    u64::from_str_radix(file.get(key)?, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::input(format!("checkpoint field `{key}` is malformed")))
}

impl Checkpoint {
    pub fn new(speaker: SpeakerEncoder, backbone: Backbone, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let trainable = Trainable::init(
            config.seed,
            config.flow_hidden,
            config.flow_layers,
            Vocabulary::template(),
        )?;
        let adam = Adam::new(&trainable, 0.9, 0.98, 1e-9);
        Ok(Checkpoint {
            model: HybridModel {
                speaker,
                backbone,
                trainable,
            },
            config,
            step: 0,
            adam,
            interval: Interval::default(),
        })
    }

    pub fn is_trained(&self) -> bool {
        self.step > 0
    }

    pub fn to_file(&self) -> ParamFile {
        let mut f = ParamFile::new("hybrid");
        f.set("step", self.step);
        f.set("seed", self.config.seed);
        f.set(
            "config",
            serde_json::to_string(&self.config).expect("config serializes"),
        );
        f.set("flow_hidden", self.config.flow_hidden);
        f.set("flow_layers", self.config.flow_layers);
        f.set("latent_dim", LATENT_DIM);
        f.set(
            "vocab",
            serde_json::to_string(self.model.trainable.text.vocab.words()).expect("vocab serializes"),
        );
        f.set("frozen_digest", self.model.frozen_digest());
        f.set("adam_step", self.adam.step);
        f.set("interval_kl", f64_field(self.interval.kl));
        f.set("interval_contrastive", f64_field(self.interval.contrastive));
        f.set("interval_tau", f64_field(self.interval.tau));
        f.set("interval_count", self.interval.count);
        put_speaker(&mut f, &self.model.speaker);
        put_backbone(&mut f, &self.model.backbone);
        f.put("hybrid", &self.model.trainable, false);
        let names: Vec<String> = self.model.trainable.blocks().iter().map(|b| b.name.clone()).collect();
        let shapes: Vec<Vec<usize>> = self.model.trainable.blocks().iter().map(|b| b.shape.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            for (tag, buf) in [("first", &self.adam.first[i]), ("second", &self.adam.second[i])] {
                f.blocks.push(crate::checkpoint::StoredBlock {
                    name: format!("adam.{tag}.{name}"),
                    shape: shapes[i].clone(),
                    frozen: false,
                    data: buf.clone(),
                });
            }
        }
        f
    }

    pub fn from_file(f: &ParamFile) -> Result<Self> {
        if f.kind() != "hybrid" {
            return Err(Error::State(format!(
                "expected a hybrid-training checkpoint, found kind `{}`",
                f.kind()
            )));
        }
        let config: TrainConfig =
            serde_json::from_str(f.get("config")?).map_err(|e| Error::input(format!("checkpoint config: {e}")))?;
        let words: Vec<String> =
            serde_json::from_str(f.get("vocab")?).map_err(|e| Error::input(format!("checkpoint vocabulary: {e}")))?;
        let mut trainable = Trainable::init(
            0,
            config.flow_hidden,
            config.flow_layers,
            Vocabulary::from_words(words)?,
        )?;
        f.take("hybrid", &mut trainable)?;
        let mut adam = Adam::new(&trainable, 0.9, 0.98, 1e-9);
        adam.step = f.get_parsed("adam_step")?;
        let names: Vec<String> = trainable.blocks().iter().map(|b| b.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            for (tag, buf) in [("first", &mut adam.first[i]), ("second", &mut adam.second[i])] {
                let b = f
                    .block(&format!("adam.{tag}.{name}"))
                    .ok_or_else(|| Error::input(format!("checkpoint lacks optimizer state for {name}")))?;
                if b.data.len() != buf.len() {
                    return Err(Error::input(format!("optimizer state for {name} has the wrong size")));
                }
                buf.copy_from_slice(&b.data);
            }
        }
        let model = HybridModel {
            speaker: take_speaker(f)?,
            backbone: take_backbone(f)?,
            trainable,
        };
        if model.frozen_digest() != f.get("frozen_digest")? {
            return Err(Error::input("frozen parameter digest does not match the stored blocks"));
        }
        Ok(Checkpoint {
            model,
            config,
            step: f.get_parsed("step")?,
            adam,
            interval: Interval {
                kl: parse_f64_field(f, "interval_kl")?,
                contrastive: parse_f64_field(f, "interval_contrastive")?,
                tau: parse_f64_field(f, "interval_tau")?,
                count: f.get_parsed("interval_count")?,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&ParamFile::read(path)?)
    }
}

/// Per-utterance values that depend only on frozen parameters.
struct UttData {
    /// First posterior layer applied to the linear spectrogram.
    proj: Array2<f64>,
    content: Array2<f64>,
    style: Array1<f64>,
    mel: MelSpectrogram,
    prompt: String,
}

/// Training utterances with their frozen-feature caches.
pub struct TrainData {
    utts: Vec<UttData>,
}

impl TrainData {
    pub fn new(corpus: &Corpus, model: &HybridModel) -> Result<Self> {
        let train = corpus.split(Split::Train);
        if train.is_empty() {
            return Err(Error::input("manifest has no training utterances"));
        }
        let missing: Vec<String> = train
            .iter()
            .filter(|u| u.entry.prompt_text.trim().is_empty())
            .map(|u| u.entry.audio_path.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::input(format!(
                "utterances without prompts: {}",
                missing.join(", ")
            )));
        }
        let utts = train
            .iter()
            .map(|u| {
                Ok(UttData {
                    proj: model.backbone.posterior.project_input(u.lin.values.view()),
                    content: content_extract(&u.mel),
                    style: model.speaker.encode(&u.mel)?.vector,
                    mel: u.mel.clone(),
                    prompt: u.entry.prompt_text.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(TrainData { utts })
    }

    pub fn len(&self) -> usize {
        self.utts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utts.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BatchItem {
    utt: usize,
    start: usize,
    len: usize,
    augment: Option<f64>,
    seed: u64,
}

fn sample_batch(data: &TrainData, config: &TrainConfig, step: usize) -> Vec<BatchItem> {
    let mut rng = stream(config.seed, &[0x7B47, step as u64]);
    (0..config.batch_size)
        .map(|i| {
            let utt = rng.random_range(0..data.utts.len());
            let frames = data.utts[utt].mel.frames();
            let len = config.segment_frames.min(frames);
            let start = rng.random_range(0..=frames - len);
            let augment = (config.sr_augment_enabled && rng.random::<f64>() < config.sr_augment_prob)
                .then(|| rng.random_range(SR_RATIO_MIN..=SR_RATIO_MAX));
            BatchItem {
                utt,
                start,
                len,
                augment,
                seed: derive_seed(config.seed, &[0x17E3, step as u64, i as u64]),
            }
        })
        .collect()
}

/// One optimizer step on a freshly sampled batch. Only trainable blocks are
/// touched; the returned breakdown is the batch mean.
pub fn train_step(ckpt: &mut Checkpoint, data: &TrainData) -> Result<LossBreakdown> {
    let config = ckpt.config.clone();
    let step = ckpt.step;
    let items = sample_batch(data, &config, step);
    let alpha = config.alpha;
    let model = &ckpt.model;
    let tr = &model.trainable;
    let tau = tr.tau.value();
    let mut grad = tr.zeros_like();
    let b = items.len() as f64;
    let (w_kl, w_c) = ((1.0 - alpha) / b, alpha / b);
    let (mut kl_sum, mut c_sum) = (0.0, 0.0);

    for item in &items {
        let u = &data.utts[item.utt];
        let mut rng = stream(item.seed, &[]);
        let style = match item.augment {
            Some(r) => model.speaker.embed_raw(&sr_augment(&u.mel, r)?.values),
            None => u.style.clone(),
        };
        let (start, end) = (item.start, item.start + item.len);

        // KL branch
        let (mu, ls) = model
            .backbone
            .posterior
            .stats_segment(u.proj.view(), style.view(), start, end);
        let noise = standard_normal(item.len, LATENT_DIM, &mut rng);
        let post = LatentPosterior::from_noise(mu, ls, noise)?;
        let lo = start.saturating_sub(1);
        let hi = (end + 1).min(u.content.nrows());
        let raw = u.content.slice(s![lo..hi, ..]);
        let c = tr.bottleneck.project(raw)?;
        let (prior_w, ptrace) = tr.prior.forward_cached(c.view())?;
        let a = start - lo;
        let prior = crate::latent::PriorStats {
            mu_theta: prior_w.mu_theta.slice(s![a..a + item.len, ..]).to_owned(),
            log_sigma_theta: prior_w.log_sigma_theta.slice(s![a..a + item.len, ..]).to_owned(),
        };
        let (fout, ftrace) = tr.flow.forward_cached(post.z.view(), style.view())?;
        let (kl, g) = kl_with_grad(&post, &prior, &fout)?;
        kl_sum += kl;
        if w_kl > 0.0 {
            tr.flow.backward(
                &ftrace,
                (&g.d_transformed * w_kl).view(),
                (&g.d_log_det * w_kl).view(),
                &mut grad.flow,
            );
            let mut dmu = Array2::zeros((hi - lo, LATENT_DIM));
            let mut dls = Array2::zeros((hi - lo, LATENT_DIM));
            dmu.slice_mut(s![a..a + item.len, ..]).assign(&(&g.d_mu_theta * w_kl));
            dls.slice_mut(s![a..a + item.len, ..])
                .assign(&(&g.d_log_sigma_theta * w_kl));
            let dc = tr.prior.backward(&ptrace, dmu.view(), dls.view(), &mut grad.prior);
            tr.bottleneck
                .linear
                .backward_params(raw, dc.view(), &mut grad.bottleneck.linear);
        }

        // contrastive branch
        let tcache = tr.text.forward_cached(&u.prompt)?;
        let projected = &tcache.embedding.projected;
        let negs = make_negatives_with(projected.view(), config.chunks, config.negatives, &mut rng)?;
        let out = contrastive_loss(projected.view(), &negs, style.view(), tau)?;
        c_sum += out.loss;
        if w_c > 0.0 {
            tr.text.backward(&tcache, (&out.dg * w_c).view(), None, &mut grad.text);
            grad.tau.blocks_mut()[0][0] += out.dtau * w_c;
        }
    }

    let l_kl = kl_sum / b;
    let l_contrastive = c_sum / b;
    let breakdown = LossBreakdown {
        step: step + 1,
        l_kl,
        l_contrastive,
        total: (1.0 - alpha) * l_kl + alpha * l_contrastive,
        tau,
    };
    if !breakdown.total.is_finite() || grad.sq_norm().is_nan() {
        return Err(Error::Numeric(format!(
            "loss diverged at step {}: kl {l_kl}, contrastive {l_contrastive}, tau {tau}",
            step + 1
        )));
    }
    clip_grad_norm(&mut grad, config.grad_clip);
    let lr = config.lr_at(step);
    let ckpt_model = &mut ckpt.model.trainable;
    ckpt.adam.update(ckpt_model, &grad, lr);
    ckpt_model.tau.clamp();
    ckpt.step += 1;
    Ok(breakdown)
}

/// Where a training run writes its artifacts. With no directory the run is
/// purely in memory.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
    /// Stop after this step even if `max_steps` is larger.
    pub stop_at: Option<usize>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.hvc";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";

fn append_rows(path: &Path, rows: &[LossBreakdown]) -> Result<()> {
    let new = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if new {
        text.push_str(LOSS_LOG_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Trains from `ckpt.step` up to `config.max_steps`, returning the interval
/// loss rows produced during this call. The frozen digest is verified at
/// the end.
pub fn run_training(ckpt: &mut Checkpoint, data: &TrainData, out: &RunOutput) -> Result<Vec<LossBreakdown>> {
    let frozen = ckpt.model.frozen_digest();
    let end = out.stop_at.unwrap_or(usize::MAX).min(ckpt.config.max_steps);
    let mut rows = Vec::new();
    let mut pending = Vec::new();
    if let Some(dir) = &out.dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    while ckpt.step < end {
        let l = match train_step(ckpt, data) {
            Ok(l) => l,
            Err(e) => {
                if let Some(dir) = &out.dir {
                    ckpt.save(&dir.join("diverged.hvc"))?;
                }
                return Err(e);
            }
        };
        ckpt.interval.add(&l);
        if ckpt.step.is_multiple_of(ckpt.config.log_every) {
            let row = ckpt.interval.flush(ckpt.step, ckpt.config.alpha);
            rows.push(row);
            pending.push(row);
        }
        let at_checkpoint = ckpt.step.is_multiple_of(ckpt.config.checkpoint_every) || ckpt.step == end;
        if let (Some(dir), true) = (&out.dir, at_checkpoint) {
            append_rows(&dir.join(LOSS_LOG_FILE), &pending)?;
            pending.clear();
            ckpt.save(&dir.join(CHECKPOINT_FILE))?;
        }
    }
    if ckpt.model.frozen_digest() != frozen {
        return Err(Error::State("frozen parameters changed during training".into()));
    }
    Ok(rows)
}

/// Hybrid training from a backbone file, or resumed from a hybrid
/// checkpoint when `resume` is given.
pub fn train_hybrid(
    corpus: &Corpus,
    backbone_ckpt: &Path,
    config: &TrainConfig,
    resume: Option<&Path>,
    out: &RunOutput,
) -> Result<(Checkpoint, Vec<LossBreakdown>)> {
    let mut ckpt = match resume {
        Some(path) => {
            let mut c = Checkpoint::load(path)?;
            c.config.max_steps = config.max_steps;
            c
        }
        None => {
            let (speaker, backbone) = crate::checkpoint::load_backbone(backbone_ckpt)?;
            Checkpoint::new(speaker, backbone, config.clone())?
        }
    };
    let data = TrainData::new(corpus, &ckpt.model)?;
    let rows = run_training(&mut ckpt, &data, out)?;
    Ok((ckpt, rows))
}
