//! Automatic comment-quality metrics: corpus BLEU-4, METEOR and ROUGE-L.
//!
//! Scores are reported on a 0–100 scale. Choices that move absolute numbers:
//!
//! * BLEU-4 is corpus-level (n-gram counts pooled before the geometric mean)
//!   with add-one smoothing of the 2- to 4-gram precisions.
//! * METEOR uses α = 0.9, β = 3, γ = 0.5 with exact then Porter-stem matching;
//!   a synonym stage is available when a synonym table is supplied.
//! * ROUGE-L is the balanced LCS F1, averaged over sentences.
//! * All three share [`tokenize`].

mod bleu;
mod meteor;
pub mod porter;
mod rouge;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use bleu::{bleu4, sentence_bleu4, Smoothing};
pub use meteor::{meteor, MeteorConfig, MeteorStage, SynonymTable};
pub use rouge::{lcs_len, rouge_l};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("candidate/reference count mismatch: {candidates} predictions vs {references} references")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("synonym table line {line}: {msg}")]
    Synonyms { line: usize, msg: String },
}

/// Lowercase, split on whitespace, and emit every punctuation character as its
/// own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() || c == '_' {
            cur.extend(c.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub index: usize,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<Vec<SampleScore>>,
}

impl MetricReport {
    /// Two-decimal table row, e.g. `B-4 36.95  M 58.37  R-L 57.17`.
    pub fn summary_line(&self) -> String {
        format!("B-4 {:.2}  M {:.2}  R-L {:.2}  (n={})", self.bleu4, self.meteor, self.rouge_l, self.n_samples)
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub smoothing: Smoothing,
    pub meteor: MeteorConfig,
    pub per_sample: bool,
}

/// Score tokenized candidate/reference pairs. Empty candidates score zero
/// on every metric and are logged.
pub fn evaluate_pairs(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
    opts: &EvalOptions,
) -> Result<MetricReport, MetricError> {
    if candidates.len() != references.len() {
        return Err(MetricError::LengthMismatch { candidates: candidates.len(), references: references.len() });
    }
    if candidates.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let bleu = bleu4(candidates, references, opts.smoothing)?;
    let mut per = Vec::with_capacity(candidates.len());
    for (i, (c, r)) in candidates.iter().zip(references).enumerate() {
        if c.is_empty() {
            log::warn!("sample {i}: empty prediction, scored as 0");
        }
        per.push(SampleScore {
            index: i,
            bleu4: sentence_bleu4(c, r, opts.smoothing),
            meteor: meteor(c, r, &opts.meteor),
            rouge_l: rouge_l(c, r),
        });
    }
    // fixed-order sums
    let n = per.len() as f64;
    let meteor_mean = per.iter().map(|s| s.meteor).sum::<f64>() / n;
    let rouge_mean = per.iter().map(|s| s.rouge_l).sum::<f64>() / n;
    Ok(MetricReport {
        bleu4: bleu,
        meteor: meteor_mean,
        rouge_l: rouge_mean,
        n_samples: per.len(),
        per_sample: opts.per_sample.then_some(per),
    })
}

/// Read one text per line. A line holding a JSON object contributes its
/// `text`, `comment`, `prediction` or `reference` field; a JSON string
/// contributes itself; anything else is taken verbatim.
pub fn read_texts(path: &Path) -> Result<Vec<String>, MetricError> {
    let content =
        fs::read_to_string(path).map_err(|source| MetricError::Io { path: path.display().to_string(), source })?;
    Ok(content.lines().map(extract_text).collect())
}

fn extract_text(line: &str) -> String {
    let trimmed = line.trim();
    if trimmed.starts_with('{') || trimmed.starts_with('"') {
        match serde_json::from_str::<serde_json::Value>(trimmed) {
            Ok(serde_json::Value::String(s)) => return s,
            Ok(serde_json::Value::Object(map)) => {
                for key in ["text", "comment", "prediction", "reference"] {
                    if let Some(serde_json::Value::String(s)) = map.get(key) {
                        return s.clone();
                    }
                }
            }
            _ => {}
        }
    }
    line.to_string()
}

pub fn evaluate_corpus(pred_path: &Path, ref_path: &Path, opts: &EvalOptions) -> Result<MetricReport, MetricError> {
    let preds = read_texts(pred_path)?;
    let refs = read_texts(ref_path)?;
    let cands: Vec<_> = preds.iter().map(|s| tokenize(s)).collect();
    let refs: Vec<_> = refs.iter().map(|s| tokenize(s)).collect();
    evaluate_pairs(&cands, &refs, opts)
}
