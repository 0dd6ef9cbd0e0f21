//! SQL corpus ingestion and near-duplicate elimination.
//!
//! Similarity is Jaccard over token *sets*. Two dedup paths exist: [`dedup`]
//! compares every record against every kept record, and [`dedup_fast`] narrows
//! the comparisons with MinHash/LSH banding and then verifies each candidate
//! with exact Jaccard. Both walk the input in order and keep the first-seen
//! record of every near-duplicate group.

mod minhash;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::analysis::lexer::{lex, TokenKind};
use crate::analysis::{DifficultyStratum, FeatureVector, TaxonomyTag};
use crate::hashing::content_id;

pub use minhash::{dedup_fast, lsh_miss_stats, LshConfig, LshError, MinHasher, MissStats};

pub const STRING_PLACEHOLDER: &str = "<str>";
pub const NUMBER_PLACEHOLDER: &str = "<num>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Documentation,
    QaForum,
    Repository,
    Benchmark,
}

/// One input line: raw SQL plus whatever context the source provides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub text: String,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
    /// Difficulty label shipped with a benchmark; overrides the computed stratum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<DifficultyStratum>,
    /// Reference comment when the source already has one (evaluation splits).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqlRecord {
    pub id: String,
    pub text: String,
    pub source: Source,
    pub token_set: BTreeSet<String>,
    pub byte_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark_difficulty: Option<DifficultyStratum>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stratum: Option<DifficultyStratum>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<BTreeSet<TaxonomyTag>>,
}

impl SqlRecord {
    pub fn new(text: impl Into<String>, source: Source) -> Self {
        let text = text.into();
        Self {
            id: content_id(&text),
            token_set: tokenize_sql(&text),
            byte_len: text.len(),
            text,
            source,
            question: None,
            schema_text: None,
            evidence: None,
            benchmark_difficulty: None,
            reference: None,
            features: None,
            stratum: None,
            tags: None,
        }
    }

    pub fn from_raw(raw: RawRecord) -> Self {
        let mut rec = Self::new(raw.text, raw.source);
        rec.question = raw.question;
        rec.schema_text = raw.schema_text;
        rec.evidence = raw.evidence;
        rec.benchmark_difficulty = raw.difficulty;
        rec.reference = raw.reference;
        rec
    }
}

/// Build records from raw inputs, ordered by id so that merged sources give a
/// reproducible dedup order. Ties (identical text) keep their input order.
pub fn ingest(raw: impl IntoIterator<Item = RawRecord>) -> Vec<SqlRecord> {
    let mut records: Vec<SqlRecord> = raw.into_iter().map(SqlRecord::from_raw).collect();
    records.sort_by(|a, b| a.id.cmp(&b.id));
    records
}

/// Normalized token set of a SQL text: lowercased words, each punctuation
/// mark or operator on its own, string and numeric literals collapsed to
/// placeholders.
pub fn tokenize_sql(text: &str) -> BTreeSet<String> {
    lex(text)
        .into_iter()
        .map(|t| match t.kind {
            TokenKind::Str => STRING_PLACEHOLDER.to_string(),
            TokenKind::Num => NUMBER_PLACEHOLDER.to_string(),
            _ => t.text,
        })
        .collect()
}

/// |a ∩ b| / |a ∪ b|, with two empty sets counted as identical.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedRecord {
    pub dropped_id: String,
    pub kept_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub kept: Vec<String>,
    pub dropped: Vec<DroppedRecord>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DedupError {
    #[error("threshold must lie in (0, 1], got {0}")]
    Threshold(f64),
    #[error(transparent)]
    Lsh(#[from] LshError),
}

pub(crate) fn check_threshold(threshold: f64) -> Result<(), DedupError> {
    if threshold > 0.0 && threshold <= 1.0 {
        Ok(())
    } else {
        Err(DedupError::Threshold(threshold))
    }
}

/// Token sets interned to sorted integer ids, for fast exact Jaccard.
pub(crate) struct InternedSets {
    pub sets: Vec<Vec<u32>>,
}

impl InternedSets {
    pub fn new(records: &[SqlRecord]) -> Self {
        let mut ids: HashMap<&str, u32> = HashMap::new();
        let sets = records
            .iter()
            .map(|r| {
                // token_set is a BTreeSet so each set comes out deduplicated; sort the ids.
                let mut v: Vec<u32> = r
                    .token_set
                    .iter()
                    .map(|t| {
                        let next = ids.len() as u32;
                        *ids.entry(t.as_str()).or_insert(next)
                    })
                    .collect();
                v.sort_unstable();
                v
            })
            .collect();
        Self { sets }
    }

    pub fn jaccard(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (&self.sets[i], &self.sets[j]);
        if a.is_empty() && b.is_empty() {
            return 1.0;
        }
        let (mut x, mut y, mut inter) = (0, 0, 0usize);
        while x < a.len() && y < b.len() {
            match a[x].cmp(&b[y]) {
                std::cmp::Ordering::Less => x += 1,
                std::cmp::Ordering::Greater => y += 1,
                std::cmp::Ordering::Equal => {
                    inter += 1;
                    x += 1;
                    y += 1;
                }
            }
        }
        inter as f64 / (a.len() + b.len() - inter) as f64
    }
}

/// Greedy first-seen-kept scan: a record is dropped iff its similarity to some
/// already-kept record is at least `threshold`; the earliest such record is
/// reported as the one it duplicates.
pub fn dedup(records: &[SqlRecord], threshold: f64) -> Result<DedupReport, DedupError> {
    check_threshold(threshold)?;
    let sets = InternedSets::new(records);
    let mut kept: Vec<usize> = Vec::new();
    let mut dropped = Vec::new();
    for i in 0..records.len() {
        let hit = kept.iter().find_map(|&k| {
            let s = sets.jaccard(i, k);
            (s >= threshold).then_some((k, s))
        });
        match hit {
            Some((k, s)) => dropped.push(DroppedRecord {
                dropped_id: records[i].id.clone(),
                kept_id: records[k].id.clone(),
                similarity: s,
            }),
            None => kept.push(i),
        }
    }
    Ok(DedupReport { kept: kept.into_iter().map(|i| records[i].id.clone()).collect(), dropped, threshold })
}

/// Records whose ids appear in `report.kept`, in input order.
pub fn kept_records(records: &[SqlRecord], report: &DedupReport) -> Vec<SqlRecord> {
    // identical texts share an id, so hand out at most as many as were kept
    let mut budget: HashMap<&str, usize> = HashMap::new();
    for id in &report.kept {
        *budget.entry(id.as_str()).or_default() += 1;
    }
    records
        .iter()
        .filter(|r| match budget.get_mut(r.id.as_str()) {
            Some(n) if *n > 0 => {
                *n -= 1;
                true
            }
            _ => false,
        })
        .cloned()
        .collect()
}
