//! Harmonic-source synthetic speakers.
//!
//! Content (vowel sequence, relative intonation, syllable timing) is drawn
//! per utterance index and shared by every speaker, so utterance `j` of two
//! speakers says the same thing. Speakers differ in base F0, jitter,
//! spectral tilt, loudness, speaking rate and formant scaling.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, ManifestEntry, Split};
use super::prompt::{render_prompt, PromptFactors};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::signal::wav::write_wav;
use crate::signal::{Waveform, SAMPLE_RATE};

pub const F0_RANGE: (f64, f64) = (120.0, 280.0);
const PITCH_LOW_BELOW: f64 = 170.0;
const PITCH_HIGH_FROM: f64 = 230.0;
const FEMALE_FROM: f64 = 195.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PitchLevel {
    Low,
    Normal,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyLevel {
    Low,
    Mid,
    High,
}

impl EnergyLevel {
    pub fn target_rms(self) -> f64 {
        match self {
            EnergyLevel::Low => 0.025,
            EnergyLevel::Mid => 0.07,
            EnergyLevel::High => 0.18,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeedLevel {
    Slow,
    Normal,
    Fast,
}

impl SpeedLevel {
    fn rate(self) -> f64 {
        match self {
            SpeedLevel::Slow => 0.8,
            SpeedLevel::Normal => 1.0,
            SpeedLevel::Fast => 1.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpeakerSpec {
    pub id: String,
    pub base_f0: f64,
    /// Relative depth of the 5.5 Hz F0 modulation.
    pub f0_jitter: f64,
    /// dB per octave.
    pub spectral_tilt: f64,
    pub energy_level: EnergyLevel,
    pub speed_level: SpeedLevel,
    /// Syllable-rate multiplier.
    pub rate: f64,
    pub gender: Gender,
    pub formant_scale: f64,
}

impl SynthSpeakerSpec {
    pub fn pitch_level(&self) -> PitchLevel {
        if self.base_f0 < PITCH_LOW_BELOW {
            PitchLevel::Low
        } else if self.base_f0 >= PITCH_HIGH_FROM {
            PitchLevel::High
        } else {
            PitchLevel::Normal
        }
    }

    pub fn gender_word(&self) -> &'static str {
        match self.gender {
            Gender::Male => "he",
            Gender::Female => "she",
        }
    }
}

/// Speakers with base F0 spread evenly over [120, 280] Hz and balanced
/// energy and speed levels.
pub fn synth_speakers(n: usize, seed: u64) -> Vec<SynthSpeakerSpec> {
    let mut rng = stream(seed, &[0x5BEA]);
    let levels = |rng: &mut _| {
        let mut v: Vec<usize> = (0..n).map(|i| i % 3).collect();
        v.shuffle(rng);
        v
    };
    let energy = levels(&mut rng);
    let speed = levels(&mut rng);
    (0..n)
        .map(|i| {
            let (lo, hi) = F0_RANGE;
            let pos = (i as f64 + 0.5 + rng.random_range(-0.3..0.3)) / n as f64;
            let base_f0 = (lo + (hi - lo) * pos).clamp(lo, hi);
            let gender = if base_f0 < FEMALE_FROM {
                Gender::Male
            } else {
                Gender::Female
            };
            let speed_level = [SpeedLevel::Slow, SpeedLevel::Normal, SpeedLevel::Fast][speed[i]];
            let formant_scale = match gender {
                Gender::Male => 0.92,
                Gender::Female => 1.08,
            } * rng.random_range(0.97..1.03);
            SynthSpeakerSpec {
                id: format!("spk{i:02}"),
                base_f0,
                f0_jitter: rng.random_range(0.005..0.02),
                spectral_tilt: rng.random_range(-9.0..-4.0),
                energy_level: [EnergyLevel::Low, EnergyLevel::Mid, EnergyLevel::High][energy[i]],
                speed_level,
                rate: speed_level.rate() * rng.random_range(0.95..1.05),
                gender,
                formant_scale,
            }
        })
        .collect()
}

const VOWELS: [(&str, [f64; 3]); 6] = [
    ("a", [730.0, 1090.0, 2440.0]),
    ("i", [270.0, 2290.0, 3010.0]),
    ("u", [300.0, 870.0, 2240.0]),
    ("e", [530.0, 1840.0, 2480.0]),
    ("o", [570.0, 840.0, 2410.0]),
    ("ae", [660.0, 1720.0, 2410.0]),
];

#[derive(Debug, Clone, PartialEq)]
struct Syllable {
    vowel: usize,
    duration: f64,
    gap_after: f64,
    pitch_start: f64,
    pitch_end: f64,
}

/// What is said: shared across speakers for a given utterance index.
#[derive(Debug, Clone, PartialEq)]
pub struct Content {
    syllables: Vec<Syllable>,
}

impl Content {
    pub fn generate(seed: u64, index: usize) -> Self {
        let mut rng = stream(seed, &[0xC047, index as u64]);
        let target = rng.random_range(1.25..2.4);
        let mut total = 0.0;
        let mut syllables = Vec::new();
        let mut pitch: f64 = rng.random_range(0.95..1.1);
        while total < target {
            let duration = rng.random_range(0.14..0.28);
            let gap_after = if rng.random::<bool>() {
                rng.random_range(0.03..0.08)
            } else {
                0.0
            };
            let pitch_end = (pitch + rng.random_range(-0.12..0.1)).clamp(0.85, 1.15);
            syllables.push(Syllable {
                vowel: rng.random_range(0..VOWELS.len()),
                duration,
                gap_after,
                pitch_start: pitch,
                pitch_end,
            });
            pitch = pitch_end;
            total += duration + gap_after;
        }
        Content { syllables }
    }

    pub fn transcript(&self) -> String {
        self.syllables
            .iter()
            .map(|s| VOWELS[s.vowel].0)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn formant_gain(f: f64, formants: &[f64; 3], scale: f64) -> f64 {
    const BW: [f64; 3] = [80.0, 100.0, 150.0];
    const GAIN: [f64; 3] = [1.0, 0.6, 0.3];
    0.03 + (0..3)
        .map(|k| {
            let d = (f - formants[k] * scale) / BW[k];
            GAIN[k] / (1.0 + d * d)
        })
        .sum::<f64>()
}

/// Renders `content` in `speaker`'s voice.
pub fn render_utterance(speaker: &SynthSpeakerSpec, content: &Content, seed: u64) -> Waveform {
    const BLOCK: usize = 32;
    const MAX_HARMONIC_HZ: f64 = 7600.0;
    const RAMP: f64 = 0.02;
    let sr = SAMPLE_RATE as f64;
    let mut rng = stream(seed, &[0x7E4D]);
    let vibrato_phase = rng.random_range(0.0..2.0 * PI);
    let gain_jitter = rng.random_range(0.9..1.1);

    let mut out = Vec::new();
    let mut voiced_energy = 0.0;
    let mut voiced_count = 0usize;
    let mut phase = 0.0f64;
    let mut amps: Vec<f64> = Vec::new();
    for syl in &content.syllables {
        let dur = syl.duration / speaker.rate;
        let n = (dur * sr).round() as usize;
        let formants = &VOWELS[syl.vowel].1;
        for i in 0..n {
            let tau = i as f64 / sr;
            let t = out.len() as f64 / sr;
            let contour = syl.pitch_start + (syl.pitch_end - syl.pitch_start) * tau / dur;
            let f0 = speaker.base_f0 * contour * (1.0 + speaker.f0_jitter * (2.0 * PI * 5.5 * t + vibrato_phase).sin());
            if i % BLOCK == 0 {
                let harmonics = (MAX_HARMONIC_HZ / f0).floor() as usize;
                amps.clear();
                amps.extend((1..=harmonics).map(|h| {
                    let f = h as f64 * f0;
                    (f / 100.0).powf(speaker.spectral_tilt / 6.0206) * formant_gain(f, formants, speaker.formant_scale)
                }));
            }
            phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
            // sin(h*phase) by the Chebyshev recurrence
            let c2 = 2.0 * phase.cos();
            let (mut prev, mut cur) = (0.0, phase.sin());
            let mut acc = 0.0;
            for &a in &amps {
                acc += a * cur;
                let next = c2 * cur - prev;
                prev = cur;
                cur = next;
            }
            let edge = (tau / RAMP).min((dur - tau) / RAMP).clamp(0.0, 1.0);
            let env = 0.5 - 0.5 * (PI * edge).cos();
            let x = env * acc;
            voiced_energy += x * x;
            voiced_count += 1;
            out.push(x);
        }
        let gap = (syl.gap_after / speaker.rate * sr).round() as usize;
        for _ in 0..gap {
            phase = (phase + 2.0 * PI * speaker.base_f0 / sr) % (2.0 * PI);
            out.push(0.0);
        }
    }
    let rms = (voiced_energy / voiced_count.max(1) as f64).sqrt();
    let gain = if rms > 0.0 {
        speaker.energy_level.target_rms() * gain_jitter / rms
    } else {
        0.0
    };
    let samples = out.into_iter().map(|x| (x * gain).clamp(-0.99, 0.99)).collect();
    Waveform::from_samples(samples).expect("synthetic utterances are at least one window long")
}

fn split_for(index: usize, count: usize) -> Split {
    let train = (count * 8).div_ceil(10);
    let val = count / 10;
    if index < train {
        Split::Train
    } else if index < train + val {
        Split::Val
    } else {
        Split::Test
    }
}

/// Writes `n_speakers x utt_per_speaker` WAV files, `speakers.json` and a
/// JSON-lines manifest under `out_dir`, returning the manifest path.
/// Utterance indices split 80/10/10 into train/val/test, so held-out
/// utterances carry unseen content.
pub fn synth_dataset(n_speakers: usize, utt_per_speaker: usize, out_dir: &Path, seed: u64) -> Result<PathBuf> {
    if n_speakers < 8 {
        return Err(Error::input("synthetic corpus needs at least 8 speakers"));
    }
    if utt_per_speaker < 10 {
        return Err(Error::input(
            "synthetic corpus needs at least 10 utterances per speaker",
        ));
    }
    let wav_dir = out_dir.join("wavs");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let speakers = synth_speakers(n_speakers, seed);
    let contents: Vec<Content> = (0..utt_per_speaker).map(|j| Content::generate(seed, j)).collect();
    let mut entries = Vec::with_capacity(n_speakers * utt_per_speaker);
    for (i, spk) in speakers.iter().enumerate() {
        for (j, content) in contents.iter().enumerate() {
            let utt_seed = crate::rng::derive_seed(seed, &[0xA0D1, i as u64, j as u64]);
            let wave = render_utterance(spk, content, utt_seed);
            let rel = PathBuf::from("wavs").join(format!("{}_utt{j:03}.wav", spk.id));
            write_wav(out_dir.join(&rel), &wave)?;
            let mut prng = stream(utt_seed, &[0x9207]);
            let factors = PromptFactors::sample(spk, &mut prng);
            entries.push(ManifestEntry {
                audio_path: rel,
                speaker_id: spk.id.clone(),
                prompt_text: render_prompt(&factors, &mut prng),
                transcript: Some(content.transcript()),
                split: split_for(j, utt_per_speaker),
            });
        }
    }
    let spk_path = out_dir.join("speakers.json");
    let json = serde_json::to_string_pretty(&speakers).expect("speaker specs serialize");
    fs::write(&spk_path, json).map_err(|e| Error::io(&spk_path, e))?;
    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Reads the `speakers.json` written next to a synthetic manifest.
pub fn load_speakers(dir: &Path) -> Result<Vec<SynthSpeakerSpec>> {
    let p = dir.join("speakers.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::input(format!("{}: {e}", p.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::estimate_f0;

    #[test]
    fn speakers_cover_the_range() {
        let spk = synth_speakers(16, 3);
        assert!(spk.iter().all(|s| (120.0..=280.0).contains(&s.base_f0)));
        for level in [PitchLevel::Low, PitchLevel::Normal, PitchLevel::High] {
            assert!(spk.iter().filter(|s| s.pitch_level() == level).count() >= 4);
        }
        for level in [EnergyLevel::Low, EnergyLevel::Mid, EnergyLevel::High] {
            assert!(spk.iter().filter(|s| s.energy_level == level).count() >= 5);
        }
    }

    #[test]
    fn durations_within_one_to_three_seconds() {
        let spk = synth_speakers(9, 11);
        for j in 0..20 {
            let c = Content::generate(11, j);
            for s in &spk {
                let d = render_utterance(s, &c, 1).duration_secs();
                assert!((0.95..=3.05).contains(&d), "{d}");
            }
        }
    }

    #[test]
    fn measured_f0_tracks_base_f0() {
        let spk = synth_speakers(16, 1);
        let c = Content::generate(1, 0);
        let low = spk.iter().min_by(|a, b| a.base_f0.total_cmp(&b.base_f0)).unwrap();
        let high = spk.iter().max_by(|a, b| a.base_f0.total_cmp(&b.base_f0)).unwrap();
        let f_low = estimate_f0(&render_utterance(low, &c, 2)).mean_voiced().unwrap();
        let f_high = estimate_f0(&render_utterance(high, &c, 2)).mean_voiced().unwrap();
        assert!(f_high - f_low > 100.0, "{f_low} {f_high}");
        assert!((f_low / low.base_f0 - 1.0).abs() < 0.15);
    }

    #[test]
    fn split_proportions() {
        let splits: Vec<Split> = (0..20).map(|j| split_for(j, 20)).collect();
        assert_eq!(splits.iter().filter(|s| **s == Split::Train).count(), 16);
        assert_eq!(splits.iter().filter(|s| **s == Split::Val).count(), 2);
        assert_eq!(splits.iter().filter(|s| **s == Split::Test).count(), 2);
    }

    #[test]
    fn too_few_speakers_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(synth_dataset(4, 10, dir.path(), 0).is_err());
        assert!(synth_dataset(8, 5, dir.path(), 0).is_err());
    }
}
