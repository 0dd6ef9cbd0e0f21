use std::collections::HashMap;

use super::MetricError;

/// How zero n-gram precisions are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Smoothing {
    /// Add one to matches and totals of the 2- to 4-gram precisions.
    #[default]
    AddOne,
    None,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and candidate n-gram totals for orders 1..=4.
fn stats(cand: &[String], reference: &[String]) -> [(usize, usize); 4] {
    let mut out = [(0, 0); 4];
    for (slot, n) in out.iter_mut().zip(1..=4) {
        let c = ngram_counts(cand, n);
        let r = ngram_counts(reference, n);
        let matched = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
        *slot = (matched, cand.len().saturating_sub(n - 1));
    }
    out
}

fn combine(totals: &[(usize, usize); 4], cand_len: usize, ref_len: usize, smoothing: Smoothing) -> f64 {
    if cand_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for (i, &(m, t)) in totals.iter().enumerate() {
        let (m, t) = match smoothing {
            Smoothing::AddOne if i > 0 => (m + 1, t + 1),
            _ => (m, t),
        };
        if m == 0 || t == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = if cand_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / cand_len as f64).exp() };
    100.0 * bp * (log_sum / 4.0).exp()
}

/// Corpus BLEU-4 with a single reference per candidate.
pub fn bleu4(candidates: &[Vec<String>], references: &[Vec<String>], smoothing: Smoothing) -> Result<f64, MetricError> {
    if candidates.len() != references.len() {
        return Err(MetricError::LengthMismatch { candidates: candidates.len(), references: references.len() });
    }
    if candidates.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let mut totals = [(0, 0); 4];
    let (mut c_len, mut r_len) = (0, 0);
    for (c, r) in candidates.iter().zip(references) {
        for (acc, s) in totals.iter_mut().zip(stats(c, r)) {
            acc.0 += s.0;
            acc.1 += s.1;
        }
        c_len += c.len();
        r_len += r.len();
    }
    Ok(combine(&totals, c_len, r_len, smoothing))
}

pub fn sentence_bleu4(cand: &[String], reference: &[String], smoothing: Smoothing) -> f64 {
    combine(&stats(cand, reference), cand.len(), reference.len(), smoothing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::tokenize;

    fn one(c: &str, r: &str, s: Smoothing) -> f64 {
        bleu4(&[tokenize(c)], &[tokenize(r)], s).unwrap()
    }

    #[test]
    fn short_perfect_prefix_pays_brevity_penalty() {
        // all precisions 1, BP = exp(1 - 5/4)
        let got = one("a b c d", "a b c d e", Smoothing::AddOne);
        assert!((got - 77.880_078_307_140_5).abs() < 1e-9, "{got}");
        assert!((got - one("a b c d", "a b c d e", Smoothing::None)).abs() < 1e-12);
    }

    #[test]
    fn zero_fourgram_overlap() {
        // "a b c x y" vs "a b c d e": one matching trigram, no matching 4-gram
        let smoothed = one("a b c x y", "a b c d e", Smoothing::AddOne);
        let raw = one("a b c x y", "a b c d e", Smoothing::None);
        assert_eq!(raw, 0.0);
        // p1 = 3/5, p2 = (2+1)/(4+1), p3 = (1+1)/(3+1), p4 = (0+1)/(2+1); BP = 1
        let expect = 100.0 * (0.6f64 * 0.6 * 0.5 * (1.0 / 3.0)).powf(0.25);
        assert!((smoothed - expect).abs() < 1e-9);
    }

    #[test]
    fn identity_is_one_hundred() {
        let c = vec![tokenize("select the rows"), tokenize("count users by region please")];
        assert_eq!(bleu4(&c, &c, Smoothing::AddOne).unwrap(), 100.0);
        assert_eq!(bleu4(&c[1..], &c[1..], Smoothing::None).unwrap(), 100.0);
    }

    #[test]
    fn corpus_pools_counts() {
        let c = vec![tokenize("a b c d"), tokenize("e f")];
        let r = vec![tokenize("a b c d"), tokenize("e g")];
        // p1 = 5/6, p2 = (3+1)/(4+1), p3 = (2+1)/(2+1), p4 = (1+1)/(1+1), c = r = 6
        let expect = 100.0 * ((5.0f64 / 6.0) * 0.8).powf(0.25);
        assert!((bleu4(&c, &r, Smoothing::AddOne).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        assert!(matches!(bleu4(&[], &[], Smoothing::AddOne), Err(MetricError::EmptyCorpus)));
        assert!(matches!(
            bleu4(&[vec![]], &[], Smoothing::AddOne),
            Err(MetricError::LengthMismatch { candidates: 1, references: 0 })
        ));
    }

    #[test]
    fn extending_a_short_perfect_prefix_never_lowers_brevity_penalty() {
        let reference = tokenize("a b c d e f g h");
        let mut prev = 0.0;
        for k in 1..=reference.len() {
            let cand = reference[..k].to_vec();
            let bp = (1.0 - reference.len() as f64 / cand.len() as f64).exp().min(1.0);
            assert!(bp >= prev);
            prev = bp;
            let s = sentence_bleu4(&cand, &reference, Smoothing::AddOne);
            assert!((0.0..=100.0).contains(&s));
        }
    }
}
