use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FeatureVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyStratum {
    // Benchmark labels (Spider: easy/medium/hard/extra, Bird: simple/moderate/challenging)
    // are accepted as aliases so that supplied labels can take precedence.
    #[serde(alias = "easy")]
    Simple,
    #[serde(alias = "medium")]
    Moderate,
    #[serde(alias = "hard", alias = "challenging")]
    Complex,
    #[serde(alias = "extra", alias = "extra_hard")]
    HighlyComplex,
}

impl DifficultyStratum {
    pub const ALL: [DifficultyStratum; 4] = [Self::Simple, Self::Moderate, Self::Complex, Self::HighlyComplex];
}

/// Weights and bin edges for the complexity score
/// `s = joins + 2*subqueries + 2*windows + ctes + aggregates + set_ops`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DifficultyWeights {
    pub join: u32,
    pub subquery: u32,
    pub window_function: u32,
    pub cte: u32,
    pub aggregate: u32,
    pub set_operation: u32,
    /// Largest score still classified as simple.
    pub simple_max: u32,
    pub moderate_max: u32,
    pub complex_max: u32,
}

impl Default for DifficultyWeights {
    fn default() -> Self {
        Self {
            join: 1,
            subquery: 2,
            window_function: 2,
            cte: 1,
            aggregate: 1,
            set_operation: 1,
            simple_max: 0,
            moderate_max: 2,
            complex_max: 5,
        }
    }
}

impl DifficultyWeights {
    pub fn score(&self, f: &FeatureVector) -> u32 {
        self.join * f.joins_total()
            + self.subquery * f.subqueries
            + self.window_function * f.window_functions
            + self.cte * f.ctes
            + self.aggregate * f.aggregates
            + self.set_operation * f.set_operations
    }

    pub fn classify(&self, f: &FeatureVector) -> DifficultyStratum {
        let s = self.score(f);
        if s <= self.simple_max {
            DifficultyStratum::Simple
        } else if s <= self.moderate_max {
            DifficultyStratum::Moderate
        } else if s <= self.complex_max {
            DifficultyStratum::Complex
        } else {
            DifficultyStratum::HighlyComplex
        }
    }
}

/// Classify with the default weights.
pub fn classify_difficulty(f: &FeatureVector) -> DifficultyStratum {
    DifficultyWeights::default().classify(f)
}

/// Constructs that line up with the semantic-logic and omission error categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaxonomyTag {
    /// Correlated subqueries, CTEs or nesting at depth two or more.
    #[serde(rename = "A1_candidate")]
    A1Candidate,
    /// Two or more distinct join kinds.
    #[serde(rename = "A2_candidate")]
    A2Candidate,
    /// Window functions or HAVING.
    #[serde(rename = "A3_candidate")]
    A3Candidate,
    /// ORDER BY or LIMIT.
    #[serde(rename = "B2_candidate")]
    B2Candidate,
}

pub fn construct_tags(f: &FeatureVector) -> BTreeSet<TaxonomyTag> {
    let mut tags = BTreeSet::new();
    if f.correlated_subqueries > 0 || f.ctes > 0 || f.nesting_depth >= 2 {
        tags.insert(TaxonomyTag::A1Candidate);
    }
    if f.distinct_join_kinds() >= 2 {
        tags.insert(TaxonomyTag::A2Candidate);
    }
    if f.window_functions > 0 || f.having_clauses > 0 {
        tags.insert(TaxonomyTag::A3Candidate);
    }
    if f.order_by_clauses > 0 || f.limit_clauses > 0 {
        tags.insert(TaxonomyTag::B2Candidate);
    }
    tags
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("requested sample exceeds stratum population: {}", describe(.deficient))]
pub struct SampleError {
    /// (stratum, requested, available)
    pub deficient: Vec<(DifficultyStratum, usize, usize)>,
}

fn describe(d: &[(DifficultyStratum, usize, usize)]) -> String {
    d.iter().map(|(s, want, have)| format!("{s:?} wants {want}, has {have}")).collect::<Vec<_>>().join("; ")
}

/// Seeded per-stratum sampling without replacement. Output is grouped by
/// stratum (in [`DifficultyStratum::ALL`] order), each group in draw order.
pub fn stratified_sample<S: AsRef<str>>(
    items: &[(S, DifficultyStratum)],
    sizes: &BTreeMap<DifficultyStratum, usize>,
    seed: u64,
) -> Result<Vec<String>, SampleError> {
    let mut pops: BTreeMap<DifficultyStratum, Vec<&str>> = BTreeMap::new();
    for (id, s) in items {
        pops.entry(*s).or_default().push(id.as_ref());
    }
    let deficient: Vec<_> = DifficultyStratum::ALL
        .iter()
        .filter_map(|s| {
            let want = sizes.get(s).copied().unwrap_or(0);
            let have = pops.get(s).map_or(0, Vec::len);
            (want > have).then_some((*s, want, have))
        })
        .collect();
    if !deficient.is_empty() {
        return Err(SampleError { deficient });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for s in DifficultyStratum::ALL {
        let want = sizes.get(&s).copied().unwrap_or(0);
        if want == 0 {
            continue;
        }
        let pop = &pops[&s];
        for idx in rand::seq::index::sample(&mut rng, pop.len(), want).iter() {
            out.push(pop[idx].to_string());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::extract_features;
    use proptest::prelude::*;

    #[test]
    fn difficulty_bins() {
        assert_eq!(classify_difficulty(&FeatureVector::default()), DifficultyStratum::Simple);
        let f = FeatureVector { inner_joins: 1, aggregates: 1, ..Default::default() };
        assert_eq!(DifficultyWeights::default().score(&f), 2);
        assert_eq!(classify_difficulty(&f), DifficultyStratum::Moderate);
        let f =
            FeatureVector { inner_joins: 1, left_joins: 1, subqueries: 2, window_functions: 1, ..Default::default() };
        assert_eq!(DifficultyWeights::default().score(&f), 8);
        assert_eq!(classify_difficulty(&f), DifficultyStratum::HighlyComplex);
        let f = FeatureVector { subqueries: 1, ctes: 1, ..Default::default() };
        assert_eq!(classify_difficulty(&f), DifficultyStratum::Complex);
    }

    #[test]
    fn benchmark_labels_deserialize() {
        let s: DifficultyStratum = serde_json::from_str("\"extra\"").unwrap();
        assert_eq!(s, DifficultyStratum::HighlyComplex);
        let s: DifficultyStratum = serde_json::from_str("\"challenging\"").unwrap();
        assert_eq!(s, DifficultyStratum::Complex);
        assert_eq!(serde_json::to_string(&DifficultyStratum::HighlyComplex).unwrap(), "\"highly_complex\"");
    }

    #[test]
    fn tags() {
        assert!(construct_tags(&FeatureVector::default()).is_empty());
        let mixed = extract_features("select * from a left join b on a.x = b.x join c on c.y = b.y");
        assert_eq!(construct_tags(&mixed), BTreeSet::from([TaxonomyTag::A2Candidate]));
        let ranked = extract_features("select name, rank() over (order by score desc) from players order by name");
        assert_eq!(construct_tags(&ranked), BTreeSet::from([TaxonomyTag::A3Candidate, TaxonomyTag::B2Candidate]));
        let tag: String = serde_json::to_string(&TaxonomyTag::A1Candidate).unwrap();
        assert_eq!(tag, "\"A1_candidate\"");
    }

    fn population(per: usize) -> Vec<(String, DifficultyStratum)> {
        DifficultyStratum::ALL.iter().flat_map(|s| (0..per).map(move |i| (format!("{s:?}-{i}"), *s))).collect()
    }

    #[test]
    fn sampling_everything_returns_every_item() {
        let items = population(7);
        let sizes = DifficultyStratum::ALL.iter().map(|s| (*s, 7)).collect();
        let mut got = stratified_sample(&items, &sizes, 3).unwrap();
        got.sort();
        let mut want: Vec<String> = items.iter().map(|(id, _)| id.clone()).collect();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn sampling_is_seed_deterministic_and_exact_per_stratum() {
        let items = population(50);
        let sizes: BTreeMap<_, _> = [(DifficultyStratum::Simple, 5), (DifficultyStratum::Complex, 9)].into();
        let a = stratified_sample(&items, &sizes, 11).unwrap();
        assert_eq!(a, stratified_sample(&items, &sizes, 11).unwrap());
        assert_ne!(a, stratified_sample(&items, &sizes, 12).unwrap());
        assert_eq!(a.iter().filter(|id| id.starts_with("Simple")).count(), 5);
        assert_eq!(a.iter().filter(|id| id.starts_with("Complex")).count(), 9);
        assert_eq!(a.len(), 14);
        // stratum order
        assert!(a[..5].iter().all(|id| id.starts_with("Simple")));
    }

    #[test]
    fn oversized_request_names_deficient_stratum() {
        let items = population(3);
        let sizes: BTreeMap<_, _> = [(DifficultyStratum::Moderate, 4), (DifficultyStratum::Simple, 3)].into();
        let err = stratified_sample(&items, &sizes, 0).unwrap_err();
        assert_eq!(err.deficient, vec![(DifficultyStratum::Moderate, 4, 3)]);
        assert!(err.to_string().contains("Moderate"));
    }

    #[test]
    fn inclusion_frequency_is_uniform() {
        // 100 per stratum, 10 drawn each, 10,000 seeds: every item should be
        // included ~10% of the time. Per-item binomial sd is 0.003, so a flat
        // +-0.01 bound across 400 items would trip on ordinary 4-sigma tails;
        // uniformity is checked with a chi-squared test instead.
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let items = population(100);
        let sizes = DifficultyStratum::ALL.iter().map(|s| (*s, 10)).collect();
        let index: std::collections::HashMap<&str, usize> =
            items.iter().enumerate().map(|(i, (id, _))| (id.as_str(), i)).collect();
        let mut hits = vec![0u32; items.len()];
        let reps = 10_000u64;
        for seed in 0..reps {
            for id in stratified_sample(&items, &sizes, seed).unwrap() {
                hits[index[id.as_str()]] += 1;
            }
        }
        let expected = reps as f64 * 0.1;
        let chi2: f64 = hits.iter().map(|&h| (f64::from(h) - expected).powi(2) / expected).sum();
        // one constraint per stratum (hits sum to 10 * reps)
        let df = (items.len() - DifficultyStratum::ALL.len()) as f64;
        let p = 1.0 - ChiSquared::new(df).unwrap().cdf(chi2);
        assert!(p > 0.001, "chi2 {chi2} p {p}");
        let worst = hits.iter().map(|&h| (f64::from(h) / reps as f64 - 0.1).abs()).fold(0.0, f64::max);
        assert!(worst < 0.015, "max deviation {worst}");
    }

    fn arb_features() -> impl Strategy<Value = FeatureVector> {
        proptest::collection::vec(0u32..4, 18).prop_map(|v| FeatureVector {
            inner_joins: v[0],
            left_joins: v[1],
            right_joins: v[2],
            full_joins: v[3],
            cross_joins: v[4],
            subqueries: v[5],
            correlated_subqueries: v[6],
            ctes: v[7],
            aggregates: v[8],
            window_functions: v[9],
            group_by_clauses: v[10],
            having_clauses: v[11],
            order_by_clauses: v[12],
            limit_clauses: v[13],
            set_operations: v[14],
            distinct_tables: v[15],
            where_predicates: v[16],
            nesting_depth: v[17],
        })
    }

    proptest! {
        #[test]
        fn classification_is_monotone(f in arb_features(), which in 0usize..6) {
            let mut g = f;
            match which {
                0 => g.inner_joins += 1,
                1 => g.subqueries += 1,
                2 => g.window_functions += 1,
                3 => g.ctes += 1,
                4 => g.aggregates += 1,
                _ => g.set_operations += 1,
            }
            prop_assert!(classify_difficulty(&g) >= classify_difficulty(&f));
        }

        #[test]
        fn extraction_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let text = String::from_utf8_lossy(&bytes);
            let f = extract_features(&text);
            let _ = classify_difficulty(&f);
        }
    }
}
