//! Shared tiny fixture for unit tests: a small synthetic corpus with
//! briefly pretrained encoders.

use std::sync::OnceLock;

use crate::data::{synth_dataset, Corpus};
use crate::encoders::{pretrain_speaker_encoder, SpeakerEncoder, SpeakerPretrainConfig};
use crate::latent::{pretrain_backbone, Backbone, BackboneConfig};

pub(crate) struct Fixture {
    pub corpus: Corpus,
    pub speaker: SpeakerEncoder,
    pub backbone: Backbone,
    _dir: tempfile::TempDir,
}

pub(crate) fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_dataset(8, 10, dir.path(), 3).unwrap();
        let corpus = Corpus::load(&manifest).unwrap();
        let sp_cfg = SpeakerPretrainConfig {
            hidden: 8,
            steps: 20,
            batch_size: 4,
            ..Default::default()
        };
        let (speaker, _) = pretrain_speaker_encoder(&corpus, &sp_cfg).unwrap();
        let bb_cfg = BackboneConfig {
            hidden: 8,
            steps: 10,
            batch_size: 4,
            segment_frames: 12,
            ..Default::default()
        };
        let (backbone, _) = pretrain_backbone(&corpus, &speaker, &bb_cfg).unwrap();
        Fixture {
            corpus,
            speaker,
            backbone,
            _dir: dir,
        }
    })
}
