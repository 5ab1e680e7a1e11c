//! The desk-scale pipeline shared by the heavy integration tests: 16
//! synthetic speakers, pretrained speaker encoder and backbone, and hybrid
//! training at three alphas.

#![allow(dead_code)]

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use hybridvc::data::{load_speakers, synth_dataset, Corpus, Split, SynthSpeakerSpec, Utterance};
use hybridvc::encoders::{pretrain_speaker_encoder, SpeakerEncoder, SpeakerPretrainConfig, SpeakerPretrainReport};
use hybridvc::latent::{pretrain_backbone, Backbone, BackboneConfig, BackboneReport};
use hybridvc::training::{alpha_sweep, Checkpoint, SweepResult, TrainConfig};

pub const SWEEP_ALPHAS: [f64; 3] = [0.1, 0.5, 0.9];

pub struct Desk {
    pub corpus: Corpus,
    pub speaker_specs: Vec<SynthSpeakerSpec>,
    pub speaker: SpeakerEncoder,
    pub speaker_report: SpeakerPretrainReport,
    pub backbone: Backbone,
    pub backbone_report: BackboneReport,
    pub sweep: SweepResult,
    pub pretrain_time: Duration,
    pub sweep_time: Duration,
    _dir: tempfile::TempDir,
}

impl Desk {
    /// The alpha = 0.5 run.
    pub fn main_run(&self) -> &Checkpoint {
        let i = SWEEP_ALPHAS.iter().position(|&a| a == 0.5).unwrap();
        &self.sweep.checkpoints[i]
    }

    /// Validation and test utterances: unseen content for every speaker.
    pub fn held_out(&self) -> Vec<&Utterance> {
        let mut v = self.corpus.split(Split::Val);
        v.extend(self.corpus.split(Split::Test));
        v
    }
}

static D: OnceLock<Desk> = OnceLock::new();

/// Whether the pipeline has already been built in this process.
pub fn built() -> bool {
    D.get().is_some()
}

pub fn desk() -> &'static Desk {
    D.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let t = Instant::now();
        let manifest = synth_dataset(16, 20, dir.path(), 0).unwrap();
        let corpus = Corpus::load(&manifest).unwrap();
        let speaker_specs = load_speakers(dir.path()).unwrap();
        let (speaker, speaker_report) = pretrain_speaker_encoder(&corpus, &SpeakerPretrainConfig::default()).unwrap();
        let (backbone, backbone_report) = pretrain_backbone(&corpus, &speaker, &BackboneConfig::default()).unwrap();
        let pretrain_time = t.elapsed();
        eprintln!("pretraining took {pretrain_time:.1?}");
        let t = Instant::now();
        let sweep = alpha_sweep(&corpus, &speaker, &backbone, &SWEEP_ALPHAS, &TrainConfig::default()).unwrap();
        let sweep_time = t.elapsed();
        eprintln!("hybrid training at {} alphas took {sweep_time:.1?}", SWEEP_ALPHAS.len());
        Desk {
            corpus,
            speaker_specs,
            speaker,
            speaker_report,
            backbone,
            backbone_report,
            sweep,
            pretrain_time,
            sweep_time,
            _dir: dir,
        }
    })
}
