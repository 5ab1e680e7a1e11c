//! Dataset ingestion and the synthetic multi-speaker corpus.

mod corpus;
mod manifest;
mod prompt;
mod synth;

pub use corpus::{Corpus, Utterance};
pub use manifest::{load_manifest, write_manifest, ManifestEntry, Split};
pub use prompt::{render_prompt, PromptFactors, PROMPT_DROPOUT, TEMPLATE_WORDS};
pub use synth::{
    load_speakers, render_utterance, synth_dataset, synth_speakers, Content, EnergyLevel, Gender, PitchLevel,
    SpeedLevel, SynthSpeakerSpec, F0_RANGE,
};
