use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::manifest::{load_manifest, ManifestEntry, Split};
use crate::error::Result;
use crate::signal::wav::read_wav;
use crate::signal::{mel_spectrogram, stft_linear, LinearSpectrogram, MelSpectrogram, StftConfig, Waveform};

/// A manifest utterance with its spectral features.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub entry: ManifestEntry,
    /// Index into [`Corpus::speakers`].
    pub speaker: usize,
    pub lin: LinearSpectrogram,
    pub mel: MelSpectrogram,
}

/// A validated manifest with features computed for every entry.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub base: PathBuf,
    /// Sorted speaker ids.
    pub speakers: Vec<String>,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn load(manifest: &Path) -> Result<Self> {
        let entries = load_manifest(manifest)?;
        let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
        let speakers: Vec<String> = entries
            .iter()
            .map(|e| e.speaker_id.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let cfg = StftConfig::default();
        let utterances = entries
            .into_iter()
            .map(|entry| {
                let wave = read_wav(entry.resolved_audio(&base))?;
                let lin = stft_linear(&wave, &cfg)?;
                let mel = mel_spectrogram(&lin)?;
                let speaker = speakers
                    .binary_search(&entry.speaker_id)
                    .expect("speaker collected above");
                Ok(Utterance {
                    entry,
                    speaker,
                    lin,
                    mel,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            base,
            speakers,
            utterances,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.utterances.iter().filter(|u| u.entry.split == split).collect()
    }

    pub fn utterances_per_speaker(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for u in &self.utterances {
            *counts.entry(u.speaker).or_insert(0) += 1;
        }
        counts
    }

    pub fn load_wave(&self, u: &Utterance) -> Result<Waveform> {
        read_wav(u.entry.resolved_audio(&self.base))
    }
}
