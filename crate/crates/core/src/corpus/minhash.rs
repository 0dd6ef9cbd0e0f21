use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_threshold, DedupError, DedupReport, DroppedRecord, InternedSets, SqlRecord};
use crate::hashing::{fnv1a64, mix64};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LshConfig {
    /// Signature length.
    pub num_perm: usize,
    pub bands: usize,
    pub rows: usize,
    pub seed: u64,
}

impl Default for LshConfig {
    fn default() -> Self {
        Self { num_perm: 128, bands: 32, rows: 4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LshError {
    #[error("bands ({bands}) x rows ({rows}) must equal the signature length ({num_perm})")]
    Shape { num_perm: usize, bands: usize, rows: usize },
}

impl LshConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), LshError> {
        if self.bands == 0 || self.rows == 0 || self.bands * self.rows != self.num_perm {
            return Err(LshError::Shape { num_perm: self.num_perm, bands: self.bands, rows: self.rows });
        }
        Ok(())
    }

    /// Probability that a pair with Jaccard `s` shares at least one band.
    pub fn candidate_probability(&self, s: f64) -> f64 {
        1.0 - (1.0 - s.powi(self.rows as i32)).powi(self.bands as i32)
    }
}

/// Seeded MinHash over token sets. Token hashes are FNV-1a of the token text,
/// so signatures do not depend on the rest of the corpus.
#[derive(Debug, Clone)]
pub struct MinHasher {
    seeds: Vec<u64>,
}

impl MinHasher {
    pub fn new(num_perm: usize, seed: u64) -> Self {
        let seeds = (0..num_perm as u64).map(|i| mix64(seed ^ mix64(i))).collect();
        Self { seeds }
    }

    pub fn signature(&self, tokens: &BTreeSet<String>) -> Vec<u64> {
        let mut sig = vec![u64::MAX; self.seeds.len()];
        for t in tokens {
            let th = fnv1a64(t.as_bytes());
            for (slot, s) in sig.iter_mut().zip(&self.seeds) {
                *slot = (*slot).min(mix64(th ^ s));
            }
        }
        sig
    }
}

fn band_keys(sig: &[u64], rows: usize) -> Vec<u64> {
    sig.chunks(rows)
        .enumerate()
        .map(|(b, chunk)| chunk.iter().fold(mix64(b as u64), |acc, &v| mix64(acc ^ v)))
        .collect()
}

fn signatures(records: &[SqlRecord], cfg: &LshConfig) -> Vec<Vec<u64>> {
    let hasher = MinHasher::new(cfg.num_perm, cfg.seed);
    records.par_iter().map(|r| band_keys(&hasher.signature(&r.token_set), cfg.rows)).collect()
}

/// Same contract as [`super::dedup`], but each record is only compared with
/// kept records sharing an LSH band. Candidates are verified with exact
/// Jaccard, so false positives never cause a drop; a true near-duplicate that
/// shares no band is the only way the two paths can disagree.
pub fn dedup_fast(records: &[SqlRecord], threshold: f64, cfg: &LshConfig) -> Result<DedupReport, DedupError> {
    check_threshold(threshold)?;
    cfg.validate()?;
    let sets = InternedSets::new(records);
    let keys = signatures(records, cfg);
    let mut buckets: Vec<HashMap<u64, Vec<usize>>> = vec![HashMap::new(); cfg.bands];
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (i, rec_keys) in keys.iter().enumerate() {
        let candidates: BTreeSet<usize> =
            rec_keys.iter().zip(&buckets).filter_map(|(k, band)| band.get(k)).flatten().copied().collect();
        let hit = candidates.into_iter().find_map(|k| {
            let s = sets.jaccard(i, k);
            (s >= threshold).then_some((k, s))
        });
        match hit {
            Some((k, s)) => dropped.push(DroppedRecord {
                dropped_id: records[i].id.clone(),
                kept_id: records[k].id.clone(),
                similarity: s,
            }),
            None => {
                for (k, band) in rec_keys.iter().zip(buckets.iter_mut()) {
                    band.entry(*k).or_default().push(i);
                }
                kept.push(i);
            }
        }
    }
    Ok(DedupReport { kept: kept.into_iter().map(|i| records[i].id.clone()).collect(), dropped, threshold })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissStats {
    /// Pairs whose exact Jaccard is at or above the threshold.
    pub similar_pairs: usize,
    /// Of those, pairs sharing no LSH band.
    pub missed_pairs: usize,
}

impl MissStats {
    pub fn rate(&self) -> f64 {
        if self.similar_pairs == 0 {
            0.0
        } else {
            self.missed_pairs as f64 / self.similar_pairs as f64
        }
    }
}

/// Measure how often banding fails to propose a truly similar pair. Quadratic
/// in corpus size; meant for audits and tests, not production runs.
pub fn lsh_miss_stats(records: &[SqlRecord], threshold: f64, cfg: &LshConfig) -> Result<MissStats, DedupError> {
    check_threshold(threshold)?;
    cfg.validate()?;
    let sets = InternedSets::new(records);
    let keys = signatures(records, cfg);
    let (similar_pairs, missed_pairs) = (0..records.len())
        .into_par_iter()
        .map(|i| {
            let mut similar = 0;
            let mut missed = 0;
            for j in (i + 1)..records.len() {
                if sets.jaccard(i, j) >= threshold {
                    similar += 1;
                    if !keys[i].iter().zip(&keys[j]).any(|(a, b)| a == b) {
                        missed += 1;
                    }
                }
            }
            (similar, missed)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(MissStats { similar_pairs, missed_pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{dedup, Source};

    #[test]
    fn shape_mismatch_is_a_config_error() {
        let cfg = LshConfig { num_perm: 128, bands: 30, rows: 4, seed: 1 };
        assert!(matches!(dedup_fast(&[], 0.9, &cfg), Err(DedupError::Lsh(LshError::Shape { .. }))));
    }

    #[test]
    fn empty_corpus() {
        let r = dedup_fast(&[], 0.9, &LshConfig::default()).unwrap();
        assert!(r.kept.is_empty() && r.dropped.is_empty());
    }

    #[test]
    fn extremes_match_exact_path() {
        // every pair is either identical or disjoint
        let mut recs = Vec::new();
        for i in 0..30 {
            let text = format!("w{} x{} y{}", i % 7, i % 7, i % 7);
            recs.push(SqlRecord::new(text, Source::Repository));
        }
        let cfg = LshConfig::with_seed(9);
        assert_eq!(dedup_fast(&recs, 0.9, &cfg).unwrap(), dedup(&recs, 0.9).unwrap());
        assert_eq!(dedup_fast(&recs, 0.9, &cfg).unwrap().kept.len(), 7);
    }

    #[test]
    fn signature_agreement_estimates_jaccard() {
        let a: BTreeSet<String> = (0..100).map(|i| format!("t{i}")).collect();
        let b: BTreeSet<String> = (20..120).map(|i| format!("t{i}")).collect();
        // true Jaccard = 80 / 120
        let h = MinHasher::new(1024, 5);
        let (sa, sb) = (h.signature(&a), h.signature(&b));
        let est = sa.iter().zip(&sb).filter(|(x, y)| x == y).count() as f64 / 1024.0;
        assert!((est - 80.0 / 120.0).abs() < 0.05, "estimate {est}");
    }

    #[test]
    fn candidate_probability_at_operating_points() {
        let cfg = LshConfig::default();
        assert!(cfg.candidate_probability(0.8) > 0.9999);
        assert!(cfg.candidate_probability(0.9) > 0.999_999);
        assert!(cfg.candidate_probability(0.2) < 0.06);
    }
}
