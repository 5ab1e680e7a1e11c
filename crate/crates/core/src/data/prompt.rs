//! Templated style prompts covering gender, pitch, energy and speed, with
//! each factor independently droppable.

use rand::seq::IndexedRandom;
use rand::Rng;

use super::synth::{EnergyLevel, Gender, PitchLevel, SpeedLevel, SynthSpeakerSpec};

/// Probability that any one factor is left out of a prompt.
pub const PROMPT_DROPOUT: f64 = 0.3;
/// Probability of the terse comma-separated form instead of a sentence.
const TERSE_PROB: f64 = 0.25;

/// Every word the templates can produce, in vocabulary order.
pub const TEMPLATE_WORDS: &[&str] = &[
    "the", "speaker", "someone", "he", "she", "a", "man", "woman", "male", "female", "speaks", "with", "and", "at",
    "pitch", "volume", "speed", "low", "deep", "lower", "normal", "moderate", "high", "higher", "quiet", "soft",
    "loud", "slow", "steady", "average", "fast", "rapid",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PromptFactors {
    pub gender: Option<Gender>,
    pub pitch: Option<PitchLevel>,
    pub energy: Option<EnergyLevel>,
    pub speed: Option<SpeedLevel>,
}

impl PromptFactors {
    /// Keeps each of the speaker's factors with probability `1 - PROMPT_DROPOUT`.
    pub fn sample<R: Rng>(spk: &SynthSpeakerSpec, rng: &mut R) -> Self {
        let mut keep = || rng.random::<f64>() >= PROMPT_DROPOUT;
        PromptFactors {
            gender: keep().then_some(spk.gender),
            pitch: keep().then_some(spk.pitch_level()),
            energy: keep().then_some(spk.energy_level),
            speed: keep().then_some(spk.speed_level),
        }
    }
}

fn pick<R: Rng>(words: &[&'static str], rng: &mut R) -> &'static str {
    words.choose(rng).copied().expect("non-empty word list")
}

/// Renders a prompt. The comparatives "higher"/"lower" are only used when
/// pitch and energy are not both present, so a bag of words never leaves it
/// ambiguous which factor a comparative modifies.
pub fn render_prompt<R: Rng>(f: &PromptFactors, rng: &mut R) -> String {
    let single = f.pitch.is_some() != f.energy.is_some();
    let comparative = single && rng.random::<bool>();
    let pitch = f.pitch.map(|p| {
        let w = match (p, comparative) {
            (PitchLevel::Low, true) => "lower",
            (PitchLevel::High, true) => "higher",
            (PitchLevel::Low, false) => pick(&["low", "deep"], rng),
            (PitchLevel::High, false) => "high",
            (PitchLevel::Normal, _) => pick(&["normal", "moderate"], rng),
        };
        format!("{w} pitch")
    });
    let energy = f.energy.map(|e| {
        let w = match (e, comparative) {
            (EnergyLevel::Low, true) => "lower",
            (EnergyLevel::High, true) => "higher",
            (EnergyLevel::Low, false) => pick(&["quiet", "soft"], rng),
            (EnergyLevel::High, false) => "loud",
            (EnergyLevel::Mid, _) => pick(&["normal", "moderate"], rng),
        };
        format!("{w} volume")
    });
    let speed = f.speed.map(|s| {
        let w = match s {
            SpeedLevel::Slow => "slow",
            SpeedLevel::Normal => pick(&["steady", "average"], rng),
            SpeedLevel::Fast => pick(&["fast", "rapid"], rng),
        };
        format!("{w} speed")
    });

    if rng.random::<f64>() < TERSE_PROB {
        let mut parts = Vec::new();
        if let Some(g) = f.gender {
            parts.push(
                match g {
                    Gender::Male => pick(&["male", "man"], rng),
                    Gender::Female => pick(&["female", "woman"], rng),
                }
                .to_string(),
            );
        }
        parts.extend(pitch.clone());
        parts.extend(energy.clone());
        parts.extend(speed.clone());
        if !parts.is_empty() {
            return parts.join(", ");
        }
    }

    let subject = match f.gender {
        Some(Gender::Male) => pick(&["he", "a man", "a male speaker"], rng),
        Some(Gender::Female) => pick(&["she", "a woman", "a female speaker"], rng),
        None => pick(&["the speaker", "someone"], rng),
    };
    let mut text = format!("{subject} speaks");
    let qualities: Vec<String> = pitch.into_iter().chain(energy).collect();
    if !qualities.is_empty() {
        text.push_str(" with ");
        text.push_str(&qualities.join(" and "));
    }
    if let Some(s) = speed {
        text.push_str(" at ");
        text.push_str(&s);
    }
    text
}
