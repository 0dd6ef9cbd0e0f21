use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{RatingMetric, RatingRecord};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KappaError {
    #[error("no items to score")]
    Empty,
    #[error("item {item} has {got} ratings, expected {expected} like every other item")]
    UnequalRaters { item: usize, got: usize, expected: usize },
    #[error("kappa needs at least two raters per item")]
    TooFewRaters,
    #[error("all ratings fall in one category; chance agreement is 1 and kappa is undefined")]
    Degenerate,
}

/// Fleiss' kappa over an items x categories count matrix. Every row must sum
/// to the same number of raters.
pub fn fleiss_kappa(counts: &[Vec<usize>]) -> Result<f64, KappaError> {
    let Some(first) = counts.first() else {
        return Err(KappaError::Empty);
    };
    let n: usize = first.iter().sum();
    if n < 2 {
        return Err(KappaError::TooFewRaters);
    }
    let k = counts.iter().map(Vec::len).max().unwrap_or(0);
    let mut totals = vec![0usize; k];
    let mut p_bar = 0.0;
    for (i, row) in counts.iter().enumerate() {
        let got: usize = row.iter().sum();
        if got != n {
            return Err(KappaError::UnequalRaters { item: i, got, expected: n });
        }
        let agree: usize = row.iter().map(|&c| c * c).sum::<usize>() - n;
        p_bar += agree as f64 / (n * (n - 1)) as f64;
        for (t, &c) in totals.iter_mut().zip(row) {
            *t += c;
        }
    }
    let big_n = counts.len() as f64;
    p_bar /= big_n;
    let denom = big_n * n as f64;
    let p_e: f64 = totals.iter().map(|&t| (t as f64 / denom).powi(2)).sum();
    if (1.0 - p_e).abs() < 1e-12 {
        return Err(KappaError::Degenerate);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaMode {
    /// Each (item, model, metric) triple is one subject.
    #[default]
    Pooled,
    /// Separate kappa per metric.
    PerMetric,
}

/// Kappa on the calibration items. Subjects are (item, model[, metric]).
/// Returns a single `"pooled"` entry or one entry per metric name.
pub fn kappa_from_ratings(
    ratings: &[RatingRecord],
    calibration: &BTreeSet<String>,
    mode: KappaMode,
) -> Result<BTreeMap<String, f64>, KappaError> {
    let mut subjects: BTreeMap<(RatingMetric, &str, &str), Vec<usize>> = BTreeMap::new();
    for r in ratings.iter().filter(|r| calibration.contains(&r.item_id)) {
        for m in RatingMetric::ALL {
            let s = r.score(m);
            if !(1..=4).contains(&s) {
                continue;
            }
            subjects.entry((m, &r.item_id, &r.model_id)).or_insert_with(|| vec![0; 4])[usize::from(s - 1)] += 1;
        }
    }
    let mut out = BTreeMap::new();
    match mode {
        KappaMode::Pooled => {
            let rows: Vec<_> = subjects.into_values().collect();
            out.insert("pooled".to_string(), fleiss_kappa(&rows)?);
        }
        KappaMode::PerMetric => {
            for m in RatingMetric::ALL {
                let rows: Vec<_> = subjects.iter().filter(|((mm, _, _), _)| *mm == m).map(|(_, v)| v.clone()).collect();
                let name =
                    serde_json::to_value(m).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
                out.insert(name, fleiss_kappa(&rows)?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_worked_fixture() {
        // P_i = 1, 0; P-bar 0.5; p = (3/4, 1/4); P_e = 10/16
        let k = fleiss_kappa(&[vec![2, 0], vec![1, 1]]).unwrap();
        assert!((k + 1.0 / 3.0).abs() < 1e-12, "{k}");
    }

    #[test]
    fn perfect_agreement_is_one() {
        let k = fleiss_kappa(&[vec![3, 0, 0], vec![0, 3, 0], vec![0, 0, 3]]).unwrap();
        assert!((k - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classic_textbook_table() {
        // 10 subjects, 14 raters, 5 categories; published kappa 0.210
        let t = [
            [0, 0, 0, 0, 14],
            [0, 2, 6, 4, 2],
            [0, 0, 3, 5, 6],
            [0, 3, 9, 2, 0],
            [2, 2, 8, 1, 1],
            [7, 7, 0, 0, 0],
            [3, 2, 6, 3, 0],
            [2, 5, 3, 2, 2],
            [6, 5, 2, 1, 0],
            [0, 2, 2, 3, 7],
        ];
        let rows: Vec<Vec<usize>> = t.iter().map(|r| r.to_vec()).collect();
        let k = fleiss_kappa(&rows).unwrap();
        assert!((k - 0.210).abs() < 5e-4, "{k}");
    }

    #[test]
    fn errors() {
        assert_eq!(fleiss_kappa(&[]), Err(KappaError::Empty));
        assert_eq!(fleiss_kappa(&[vec![1, 0]]), Err(KappaError::TooFewRaters));
        assert!(matches!(fleiss_kappa(&[vec![2, 0], vec![2, 1]]), Err(KappaError::UnequalRaters { item: 1, .. })));
        assert_eq!(fleiss_kappa(&[vec![2, 0], vec![2, 0]]), Err(KappaError::Degenerate));
    }

    #[test]
    fn from_ratings_modes() {
        let rec = |item: &str, rater: &str, c: u8, k: u8, n: u8| RatingRecord {
            item_id: item.into(),
            rater_id: rater.into(),
            model_id: "A".into(),
            correctness: c,
            completeness: k,
            naturalness: n,
            timestamp: 0,
        };
        let ratings = vec![
            rec("c1", "r1", 4, 3, 2),
            rec("c1", "r2", 4, 2, 2),
            rec("c2", "r1", 1, 3, 3),
            rec("c2", "r2", 2, 3, 4),
            rec("other", "r1", 1, 1, 1),
        ];
        let cal = BTreeSet::from(["c1".to_string(), "c2".to_string()]);
        let pooled = kappa_from_ratings(&ratings, &cal, KappaMode::Pooled).unwrap();
        let rows = vec![
            vec![0, 0, 0, 2],
            vec![1, 1, 0, 0],
            vec![0, 1, 1, 0],
            vec![0, 0, 2, 0],
            vec![0, 2, 0, 0],
            vec![0, 0, 1, 1],
        ];
        assert!((pooled["pooled"] - fleiss_kappa(&rows).unwrap()).abs() < 1e-12);
        let per = kappa_from_ratings(&ratings, &cal, KappaMode::PerMetric).unwrap();
        assert_eq!(per.len(), 3);
        let corr = fleiss_kappa(&[vec![0, 0, 0, 2], vec![1, 1, 0, 0]]).unwrap();
        assert!((per["correctness"] - corr).abs() < 1e-12);
    }
}
