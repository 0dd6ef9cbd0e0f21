//! Human-evaluation bookkeeping: 1–4 Likert ratings from rater pairs, the
//! floor-of-mean aggregation, Fleiss' kappa on the calibration set, Table-3
//! style score distributions and the low-score error worklist.

mod kappa;
mod plan;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use kappa::{fleiss_kappa, kappa_from_ratings, KappaError, KappaMode};
pub use plan::{
    assign_rater_pairs, assign_rater_pairs_with_remainder, blind_aliases, AssignmentPlan, PlanError, RaterPair,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingMetric {
    Correctness,
    Completeness,
    Naturalness,
}

impl RatingMetric {
    pub const ALL: [RatingMetric; 3] = [Self::Correctness, Self::Completeness, Self::Naturalness];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("likert score {0} outside 1..=4")]
pub struct ScoreRangeError(pub u8);

/// Validate one 1–4 Likert value.
pub fn check_score(s: u8) -> Result<u8, ScoreRangeError> {
    if (1..=4).contains(&s) {
        Ok(s)
    } else {
        Err(ScoreRangeError(s))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub item_id: String,
    pub rater_id: String,
    /// Blinded alias, never the real model name.
    pub model_id: String,
    pub correctness: u8,
    pub completeness: u8,
    pub naturalness: u8,
    /// Unix milliseconds.
    pub timestamp: u64,
}

impl RatingRecord {
    pub fn score(&self, m: RatingMetric) -> u8 {
        match m {
            RatingMetric::Correctness => self.correctness,
            RatingMetric::Completeness => self.completeness,
            RatingMetric::Naturalness => self.naturalness,
        }
    }

    pub fn validate(&self) -> Result<(), ScoreRangeError> {
        for m in RatingMetric::ALL {
            check_score(self.score(m))?;
        }
        Ok(())
    }
}

/// Final per-item score: mean of two raters rounded down.
pub fn aggregate_pair(r1: u8, r2: u8) -> Result<u8, ScoreRangeError> {
    Ok((check_score(r1)? + check_score(r2)?) / 2)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregatedScore {
    pub item_id: String,
    pub model_id: String,
    pub correctness: u8,
    pub completeness: u8,
    pub naturalness: u8,
    pub rater_pair: (String, String),
}

impl AggregatedScore {
    pub fn score(&self, m: RatingMetric) -> u8 {
        match m {
            RatingMetric::Correctness => self.correctness,
            RatingMetric::Completeness => self.completeness,
            RatingMetric::Naturalness => self.naturalness,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AggregateError {
    #[error("item {item_id} / model {model_id} has {count} ratings, need exactly 2")]
    RatingCount { item_id: String, model_id: String, count: usize },
    #[error(transparent)]
    Range(#[from] ScoreRangeError),
}

/// Group ratings by (item, model) and floor-average each pair. Groups that do
/// not have exactly two ratings are an error, except calibration items which
/// are skipped here (they feed kappa, not the final scores).
pub fn aggregate_ratings(
    ratings: &[RatingRecord],
    calibration: &BTreeSet<String>,
) -> Result<Vec<AggregatedScore>, AggregateError> {
    let mut groups: BTreeMap<(&str, &str), Vec<&RatingRecord>> = BTreeMap::new();
    for r in ratings {
        if calibration.contains(&r.item_id) {
            continue;
        }
        groups.entry((r.item_id.as_str(), r.model_id.as_str())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((item, model), rs)| {
            let [a, b] = rs.as_slice() else {
                return Err(AggregateError::RatingCount {
                    item_id: item.to_string(),
                    model_id: model.to_string(),
                    count: rs.len(),
                });
            };
            let (a, b) = if a.rater_id <= b.rater_id { (a, b) } else { (b, a) };
            Ok(AggregatedScore {
                item_id: item.to_string(),
                model_id: model.to_string(),
                correctness: aggregate_pair(a.correctness, b.correctness)?,
                completeness: aggregate_pair(a.completeness, b.completeness)?,
                naturalness: aggregate_pair(a.naturalness, b.naturalness)?,
                rater_pair: (a.rater_id.clone(), b.rater_id.clone()),
            })
        })
        .collect()
}

/// Counts of final scores 1..=4 per (model, metric).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionTable {
    pub rows: BTreeMap<(String, RatingMetric), [usize; 4]>,
}

impl DistributionTable {
    pub fn row(&self, model: &str, metric: RatingMetric) -> [usize; 4] {
        self.rows.get(&(model.to_string(), metric)).copied().unwrap_or([0; 4])
    }

    /// Share of scores >= 3, the "positive rating" figure.
    pub fn positive_rate(&self, model: &str, metric: RatingMetric) -> f64 {
        let r = self.row(model, metric);
        let total: usize = r.iter().sum();
        if total == 0 {
            0.0
        } else {
            (r[2] + r[3]) as f64 / total as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,metric,score_1,score_2,score_3,score_4,total\n");
        for ((model, metric), c) in &self.rows {
            let metric =
                serde_json::to_value(metric).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
            out.push_str(&format!(
                "{model},{metric},{},{},{},{},{}\n",
                c[0],
                c[1],
                c[2],
                c[3],
                c.iter().sum::<usize>()
            ));
        }
        out
    }
}

pub fn distribution_table(aggregated: &[AggregatedScore]) -> DistributionTable {
    let mut t = DistributionTable::default();
    for a in aggregated {
        for m in RatingMetric::ALL {
            let s = a.score(m);
            if (1..=4).contains(&s) {
                t.rows.entry((a.model_id.clone(), m)).or_insert([0; 4])[usize::from(s - 1)] += 1;
            }
        }
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerMetric {
    Correctness,
    Completeness,
}

/// Error taxonomy: semantic logic (A), omission (B), factual inaccuracy (C).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorCategory {
    /// Complex structure misinterpretation.
    A1,
    /// Join type confusion.
    A2,
    /// Aggregation/filtering logic error.
    A3,
    /// Missing filtering conditions.
    B1,
    /// Missing ordering/limitation logic.
    B2,
    /// Missing edge case handling.
    B3,
    /// Entity name hallucination.
    C1,
    /// Business logic hallucination.
    C2,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub item_id: String,
    pub model_id: String,
    pub trigger_metric: TriggerMetric,
    /// Filled in by an analyst.
    pub category: Option<ErrorCategory>,
    pub analyst_note: String,
}

/// One stub per (item, model) whose correctness or completeness is 1 or 2.
/// When both qualify, correctness is recorded as the trigger.
pub fn error_samples(aggregated: &[AggregatedScore]) -> Vec<ErrorSample> {
    aggregated
        .iter()
        .filter_map(|a| {
            let trigger = if a.correctness <= 2 {
                TriggerMetric::Correctness
            } else if a.completeness <= 2 {
                TriggerMetric::Completeness
            } else {
                return None;
            };
            Some(ErrorSample {
                item_id: a.item_id.clone(),
                model_id: a.model_id.clone(),
                trigger_metric: trigger,
                category: None,
                analyst_note: String::new(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn agg(item: &str, model: &str, c: u8, k: u8, n: u8) -> AggregatedScore {
        AggregatedScore {
            item_id: item.into(),
            model_id: model.into(),
            correctness: c,
            completeness: k,
            naturalness: n,
            rater_pair: ("r1".into(), "r2".into()),
        }
    }

    #[test]
    fn floor_of_mean() {
        assert_eq!(aggregate_pair(3, 4), Ok(3));
        assert_eq!(aggregate_pair(4, 4), Ok(4));
        assert_eq!(aggregate_pair(1, 4), Ok(2));
        assert_eq!(aggregate_pair(0, 4), Err(ScoreRangeError(0)));
        assert_eq!(aggregate_pair(2, 5), Err(ScoreRangeError(5)));
    }

    proptest! {
        #[test]
        fn aggregation_symmetric_and_bounded(a in 1u8..=4, b in 1u8..=4) {
            let s = aggregate_pair(a, b).unwrap();
            prop_assert_eq!(s, aggregate_pair(b, a).unwrap());
            prop_assert!(a.min(b) <= s && s <= a.max(b));
        }
    }

    #[test]
    fn distribution_hand_tally() {
        let rows = vec![
            agg("1", "m1", 4, 3, 4),
            agg("2", "m1", 3, 3, 2),
            agg("3", "m1", 1, 4, 4),
            agg("1", "m2", 2, 2, 3),
            agg("2", "m2", 4, 4, 4),
        ];
        let t = distribution_table(&rows);
        assert_eq!(t.row("m1", RatingMetric::Correctness), [1, 0, 1, 1]);
        assert_eq!(t.row("m1", RatingMetric::Completeness), [0, 0, 2, 1]);
        assert_eq!(t.row("m1", RatingMetric::Naturalness), [0, 1, 0, 2]);
        assert_eq!(t.row("m2", RatingMetric::Correctness), [0, 1, 0, 1]);
        assert_eq!(t.row("m2", RatingMetric::Naturalness), [0, 0, 1, 1]);
        assert!((t.positive_rate("m1", RatingMetric::Correctness) - 2.0 / 3.0).abs() < 1e-12);
        assert!(distribution_table(&[]).rows.is_empty());
        assert_eq!(t.row("nobody", RatingMetric::Correctness), [0; 4]);
        let csv = t.to_csv();
        assert!(csv.starts_with("model,metric,score_1"));
        assert!(csv.contains("m1,correctness,1,0,1,1,3\n"));
    }

    #[test]
    fn error_sample_rules() {
        assert!(error_samples(&[agg("1", "m", 3, 4, 1), agg("2", "m", 4, 3, 2)]).is_empty());
        let one = error_samples(&[agg("1", "m", 2, 4, 4)]);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].trigger_metric, TriggerMetric::Correctness);
        let both = error_samples(&[agg("1", "m", 2, 1, 4)]);
        assert_eq!(both.len(), 1);
        assert_eq!(both[0].trigger_metric, TriggerMetric::Correctness);
        let comp = error_samples(&[agg("1", "m", 3, 2, 4)]);
        assert_eq!(comp[0].trigger_metric, TriggerMetric::Completeness);
    }

    fn rating(item: &str, rater: &str, model: &str, s: [u8; 3]) -> RatingRecord {
        RatingRecord {
            item_id: item.into(),
            rater_id: rater.into(),
            model_id: model.into(),
            correctness: s[0],
            completeness: s[1],
            naturalness: s[2],
            timestamp: 0,
        }
    }

    #[test]
    fn aggregate_ratings_pairs_up() {
        let ratings = vec![
            rating("q1", "r2", "A", [3, 4, 2]),
            rating("q1", "r1", "A", [4, 4, 1]),
            rating("cal", "r1", "A", [1, 1, 1]),
            rating("cal", "r2", "A", [1, 1, 1]),
            rating("cal", "r3", "A", [1, 1, 1]),
        ];
        let cal = BTreeSet::from(["cal".to_string()]);
        let out = aggregate_ratings(&ratings, &cal).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].correctness, out[0].completeness, out[0].naturalness), (3, 4, 1));
        assert_eq!(out[0].rater_pair, ("r1".into(), "r2".into()));

        let err = aggregate_ratings(&ratings[..1], &cal).unwrap_err();
        assert!(matches!(err, AggregateError::RatingCount { count: 1, .. }));
    }
}
