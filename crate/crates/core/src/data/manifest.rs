use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One utterance of a JSON-lines manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub audio_path: PathBuf,
    pub speaker_id: String,
    pub prompt_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    pub split: Split,
}

impl ManifestEntry {
    pub fn resolved_audio(&self, base: &Path) -> PathBuf {
        if self.audio_path.is_absolute() {
            self.audio_path.clone()
        } else {
            base.join(&self.audio_path)
        }
    }
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e).expect("manifest entries serialize");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Parses and validates a JSON-lines manifest. Audio paths are resolved
/// against the manifest directory and every one must exist; a missing
/// file is reported together with all other missing files.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: i + 1,
            message: e.to_string(),
        })?;
        if entry.speaker_id.trim().is_empty() {
            return Err(Error::Manifest {
                line: i + 1,
                message: "empty speaker_id".into(),
            });
        }
        entries.push(entry);
    }
    let missing: Vec<PathBuf> = entries
        .iter()
        .map(|e| e.resolved_audio(base))
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingAudio(missing));
    }
    Ok(entries)
}
