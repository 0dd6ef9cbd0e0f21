/// Longest common subsequence length (O(|a|·|b|) time, O(|b|) space).
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Balanced ROUGE-L F1 on the 0–100 scale. Empty input scores 0.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        log::warn!("rouge_l on an empty sequence; scoring 0");
        return 0.0;
    }
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    100.0 * 2.0 * p * r / (p + r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::tokenize;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let (a, b) = (tokenize("the cat sat"), tokenize("the cat ran"));
        assert_eq!(lcs_len(&a, &b), 2);
        assert!((rouge_l(&a, &b) - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l(&a, &a), 100.0);
        assert_eq!(rouge_l(&a, &tokenize("dog ran far")), 0.0);
        assert_eq!(rouge_l(&[], &a), 0.0);
        assert_eq!(lcs_len(&tokenize("a b c d e"), &tokenize("a c e b d")), 3);
    }

    proptest! {
        #[test]
        fn swap_preserves_lcs_and_f1(a in proptest::collection::vec(0u8..5, 1..15), b in proptest::collection::vec(0u8..5, 1..15)) {
            let a: Vec<String> = a.iter().map(|x| x.to_string()).collect();
            let b: Vec<String> = b.iter().map(|x| x.to_string()).collect();
            prop_assert_eq!(lcs_len(&a, &b), lcs_len(&b, &a));
            prop_assert!((rouge_l(&a, &b) - rouge_l(&b, &a)).abs() < 1e-9);
            let s = rouge_l(&a, &b);
            prop_assert!((0.0..=100.0).contains(&s));
        }
    }
}
