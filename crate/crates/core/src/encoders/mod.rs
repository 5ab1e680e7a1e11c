//! The three conditioning encoders: a frozen speaker encoder producing the
//! 256-d style embedding, frozen cepstral content features with a trainable
//! bottleneck, and the trainable prompt text encoder.

mod content;
mod speaker;
mod text;

pub use content::{content_extract, Bottleneck, BOTTLENECK_DIM, CONTENT_DIM, DCT_COEFFS};
pub use speaker::{
    pretrain_speaker_encoder, SpeakerEmbedding, SpeakerEncoder, SpeakerPretrainConfig, SpeakerPretrainReport,
    SPEAKER_DIM,
};
pub use text::{TextEmbedding, TextEncoder, TokenSequence, Vocabulary, TEXT_PROJ_DIM, TEXT_RAW_DIM};

/// Fixed affine normalization of log-mel inputs to the learned encoders.
pub(crate) const MEL_NORM_MEAN: f64 = -6.0;
pub(crate) const MEL_NORM_STD: f64 = 2.5;
