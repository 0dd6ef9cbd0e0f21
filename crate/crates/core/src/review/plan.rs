use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("need a positive even number of distinct raters, got {0}")]
    Raters(usize),
    #[error("calibration item {0} is not in the item list")]
    UnknownCalibration(String),
    #[error("duplicate item id {0}")]
    DuplicateItem(String),
    #[error(
        "{items} primary items do not split evenly into {pairs} subsets; \
         the remainder of {remainder} would be appended to the last subset \
         (use assign_rater_pairs_with_remainder to accept that)"
    )]
    Uneven { items: usize, pairs: usize, remainder: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaterPair {
    pub raters: (String, String),
    pub items: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentPlan {
    pub seed: u64,
    /// Rated by every rater.
    pub calibration: Vec<String>,
    pub raters: Vec<String>,
    pub pairs: Vec<RaterPair>,
}

impl AssignmentPlan {
    /// (rater, item) work units, calibration first.
    pub fn assignments(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for item in &self.calibration {
            for r in &self.raters {
                out.push((r.clone(), item.clone()));
            }
        }
        for p in &self.pairs {
            for item in &p.items {
                out.push((p.raters.0.clone(), item.clone()));
                out.push((p.raters.1.clone(), item.clone()));
            }
        }
        out
    }

    pub fn items_for(&self, rater: &str) -> Vec<String> {
        self.assignments().into_iter().filter(|(r, _)| r == rater).map(|(_, i)| i).collect()
    }
}

/// Calibration items go to every rater; the rest are shuffled and split into
/// `raters.len() / 2` equal subsets, one per seeded rater pair.
pub fn assign_rater_pairs(
    items: &[String],
    raters: &[String],
    calibration: &BTreeSet<String>,
    seed: u64,
) -> Result<AssignmentPlan, PlanError> {
    build(items, raters, calibration, seed, false)
}

/// Like [`assign_rater_pairs`] but an uneven remainder is appended to the last subset.
pub fn assign_rater_pairs_with_remainder(
    items: &[String],
    raters: &[String],
    calibration: &BTreeSet<String>,
    seed: u64,
) -> Result<AssignmentPlan, PlanError> {
    build(items, raters, calibration, seed, true)
}

fn build(
    items: &[String],
    raters: &[String],
    calibration: &BTreeSet<String>,
    seed: u64,
    allow_remainder: bool,
) -> Result<AssignmentPlan, PlanError> {
    let distinct: BTreeSet<&String> = raters.iter().collect();
    if raters.is_empty() || !raters.len().is_multiple_of(2) || distinct.len() != raters.len() {
        return Err(PlanError::Raters(raters.len()));
    }
    let mut seen = BTreeSet::new();
    for i in items {
        if !seen.insert(i) {
            return Err(PlanError::DuplicateItem(i.clone()));
        }
    }
    if let Some(c) = calibration.iter().find(|c| !seen.contains(c)) {
        return Err(PlanError::UnknownCalibration(c.clone()));
    }
    let n_pairs = raters.len() / 2;
    let mut primary: Vec<String> = items.iter().filter(|i| !calibration.contains(*i)).cloned().collect();
    let remainder = primary.len() % n_pairs;
    if remainder != 0 && !allow_remainder {
        return Err(PlanError::Uneven { items: primary.len(), pairs: n_pairs, remainder });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled_raters = raters.to_vec();
    shuffled_raters.shuffle(&mut rng);
    primary.shuffle(&mut rng);

    let per = primary.len() / n_pairs;
    let mut pairs = Vec::with_capacity(n_pairs);
    for p in 0..n_pairs {
        let start = p * per;
        let end = if p + 1 == n_pairs { primary.len() } else { start + per };
        pairs.push(RaterPair {
            raters: (shuffled_raters[2 * p].clone(), shuffled_raters[2 * p + 1].clone()),
            items: primary[start..end].to_vec(),
        });
    }
    Ok(AssignmentPlan {
        seed,
        calibration: items.iter().filter(|i| calibration.contains(*i)).cloned().collect(),
        raters: raters.to_vec(),
        pairs,
    })
}

/// Per-item blinding: for each item, the model names are shuffled and mapped
/// to `S1`, `S2`, ... so position and alias reveal nothing about the system.
pub fn blind_aliases(items: &[String], models: &[String], seed: u64) -> BTreeMap<String, BTreeMap<String, String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items
        .iter()
        .map(|item| {
            let mut order = models.to_vec();
            order.shuffle(&mut rng);
            let map = order.into_iter().enumerate().map(|(k, m)| (format!("S{}", k + 1), m)).collect();
            (item.clone(), map)
        })
        .collect()
}
