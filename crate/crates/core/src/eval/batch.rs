use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{
    accuracy_from, char_error_rate, cos_consistency, f0_pcc, frechet_distance, prompt_moved, ssim_mel, word_error_rate,
    EmbeddingSet, PromptAccuracy, PromptFactor,
};
use crate::error::{Error, Result};
use crate::signal::wav::read_wav;
use crate::signal::waveform_to_mel;
use crate::training::HybridModel;

/// One row of a pairs file:
/// `source_path,converted_path[,prompt_text[,factor[,ref_transcript[,hyp_transcript]]]]`.
/// Empty trailing fields are treated as absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub source: PathBuf,
    pub converted: PathBuf,
    pub prompt_text: Option<String>,
    pub factor: Option<PromptFactor>,
    pub ref_transcript: Option<String>,
    pub hyp_transcript: Option<String>,
}

/// Reads a pairs CSV. A first row starting with `source_path` is taken as a
/// header. Relative paths resolve against the file's directory.
pub fn read_pairs(path: &Path) -> Result<Vec<PairSpec>> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
        if i == 0 && rec.get(0) == Some("source_path") {
            continue;
        }
        let field = |k: usize| rec.get(k).filter(|s| !s.is_empty()).map(str::to_string);
        let (Some(src), Some(conv)) = (field(0), field(1)) else {
            return Err(Error::input(format!(
                "{} row {}: source_path and converted_path are required",
                path.display(),
                i + 1
            )));
        };
        out.push(PairSpec {
            source: base.join(src),
            converted: base.join(conv),
            prompt_text: field(2),
            factor: field(3).map(|f| f.parse()).transpose()?,
            ref_transcript: field(4),
            hyp_transcript: field(5),
        });
    }
    if out.is_empty() {
        return Err(Error::input(format!("{} lists no pairs", path.display())));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub source: PathBuf,
    pub converted: PathBuf,
    pub f0_pcc: Option<f64>,
    /// SSIM between source and converted log-mels.
    pub ssim: f64,
    pub wer: Option<f64>,
    pub cer: Option<f64>,
    pub factor: Option<PromptFactor>,
    /// Strict movement in the prompted direction; absent for unvoiced pitch trials.
    pub moved: Option<bool>,
    pub cos: Option<f64>,
    /// Why a metric was left undefined, if any.
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
    pub count: usize,
}

impl Aggregate {
    fn of(values: impl Iterator<Item = f64>) -> Option<Self> {
        let mut v: Vec<f64> = values.collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Some(Aggregate {
            mean: v.iter().sum::<f64>() / n as f64,
            median,
            count: n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub f0_pcc: Option<Aggregate>,
    pub ssim: Option<Aggregate>,
    pub wer: Option<Aggregate>,
    pub cer: Option<Aggregate>,
    pub cos: Option<Aggregate>,
    pub prompt_accuracy: BTreeMap<PromptFactor, PromptAccuracy>,
    /// Fréchet distance between speaker embeddings of sources and conversions,
    /// present when a model is given and there are enough pairs.
    pub frechet: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<PairMetrics>,
    pub summary: Summary,
    pub metadata: BTreeMap<String, String>,
}

impl Summary {
    pub fn from_rows(rows: &[PairMetrics], frechet: Option<f64>) -> Self {
        let mut prompt_accuracy = BTreeMap::new();
        for f in PromptFactor::ALL {
            let outcomes: Vec<Option<bool>> = rows.iter().filter(|r| r.factor == Some(f)).map(|r| r.moved).collect();
            if !outcomes.is_empty() {
                prompt_accuracy.insert(f, accuracy_from(&outcomes));
            }
        }
        Summary {
            f0_pcc: Aggregate::of(rows.iter().filter_map(|r| r.f0_pcc)),
            ssim: Aggregate::of(rows.iter().map(|r| r.ssim)),
            wer: Aggregate::of(rows.iter().filter_map(|r| r.wer)),
            cer: Aggregate::of(rows.iter().filter_map(|r| r.cer)),
            cos: Aggregate::of(rows.iter().filter_map(|r| r.cos)),
            prompt_accuracy,
            frechet,
        }
    }
}

/// Scores every pair. Cosine consistency and the Fréchet distance need a
/// model; without one they are left out.
pub fn evaluate_pairs(pairs: &[PairSpec], model: Option<&HybridModel>) -> Result<MetricReport> {
    let mut rows = Vec::with_capacity(pairs.len());
    let mut src_emb = Vec::new();
    let mut conv_emb = Vec::new();
    for p in pairs {
        let src = read_wav(&p.source)?;
        let conv = read_wav(&p.converted)?;
        let (src_mel, conv_mel) = (waveform_to_mel(&src)?, waveform_to_mel(&conv)?);
        let mut notes = Vec::new();
        let f0 = match f0_pcc(&src, &conv) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(m)) => {
                notes.push(format!("f0_pcc: {m}"));
                None
            }
            Err(e) => return Err(e),
        };
        let (wer, cer) = match (&p.ref_transcript, &p.hyp_transcript) {
            (Some(r), Some(h)) => (Some(word_error_rate(r, h)?), Some(char_error_rate(r, h)?)),
            _ => (None, None),
        };
        let moved = p.factor.and_then(|f| {
            let m = prompt_moved(&src, &conv, f);
            if m.is_none() {
                notes.push("prompt trial excluded: no voiced frames".into());
            }
            m
        });
        let cos = match (model, &p.prompt_text) {
            (Some(m), Some(t)) => Some(cos_consistency(t, &conv, m)?),
            _ => None,
        };
        if let Some(m) = model {
            src_emb.push(m.speaker.embed_raw(&src_mel.values));
            conv_emb.push(m.speaker.embed_raw(&conv_mel.values));
        }
        rows.push(PairMetrics {
            source: p.source.clone(),
            converted: p.converted.clone(),
            f0_pcc: f0,
            ssim: ssim_mel(&src_mel, &conv_mel)?,
            wer,
            cer,
            factor: p.factor,
            moved,
            cos,
            notes,
        });
    }
    let frechet = match src_emb.first() {
        Some(first) if src_emb.len() > first.len() => {
            let stack = |v: &[ndarray::Array1<f64>], label: &str| {
                let d = v[0].len();
                EmbeddingSet::new(Array2::from_shape_fn((v.len(), d), |(i, j)| v[i][j]), label)
            };
            Some(frechet_distance(
                &stack(&src_emb, "source"),
                &stack(&conv_emb, "converted"),
            )?)
        }
        _ => None,
    };
    let summary = Summary::from_rows(&rows, frechet);
    Ok(MetricReport {
        rows,
        summary,
        metadata: BTreeMap::new(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "source",
            "converted",
            "f0_pcc",
            "ssim",
            "wer",
            "cer",
            "factor",
            "moved",
            "cos",
            "notes",
        ])
        .expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.source.display().to_string(),
                r.converted.display().to_string(),
                opt(r.f0_pcc),
                format!("{:.6}", r.ssim),
                opt(r.wer),
                opt(r.cer),
                r.factor.map(|f| f.name().to_string()).unwrap_or_default(),
                r.moved.map(|m| m.to_string()).unwrap_or_default(),
                opt(r.cos),
                r.notes.join("; "),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv is utf-8")
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(json_path, json).map_err(|e| Error::io(json_path, e))
    }
}
