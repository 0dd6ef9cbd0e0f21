use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::vocab::{BOS, EOS};
use super::PolicyError;
use crate::hashing::mix64;

/// How a k-token context picks its row of logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ContextIndex {
    /// Mixed-radix index over all V^k contexts.
    Dense,
    /// Contexts hashed into a fixed number of rows; colliding contexts share logits.
    Hashed { buckets: usize },
}

/// Softmax over a logit table indexed by the previous `order` tokens. Before
/// the start of a sequence the context is padded with BOS.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    order: usize,
    vocab_size: usize,
    index: ContextIndex,
    rows: usize,
    theta: Vec<f64>,
}

fn dense_rows(order: usize, vocab_size: usize) -> Option<usize> {
    (0..order).try_fold(1usize, |acc, _| acc.checked_mul(vocab_size))
}

impl TabularPolicy {
    /// All-zero logits, i.e. uniform conditionals.
    pub fn new(order: usize, vocab_size: usize, index: ContextIndex) -> Result<Self, PolicyError> {
        // BOS pads every context, so it must be a valid id
        if vocab_size <= BOS as usize {
            return Err(PolicyError::Shape(format!("vocabulary of {vocab_size} has no room for BOS")));
        }
        let rows = match index {
            ContextIndex::Dense => dense_rows(order, vocab_size)
                .ok_or_else(|| PolicyError::Shape(format!("{vocab_size}^{order} contexts overflow")))?,
            ContextIndex::Hashed { buckets } if buckets > 0 => buckets,
            ContextIndex::Hashed { .. } => return Err(PolicyError::Shape("zero hash buckets".into())),
        };
        let len = rows
            .checked_mul(vocab_size)
            .ok_or_else(|| PolicyError::Shape(format!("{rows} x {vocab_size} parameters overflow")))?;
        Ok(Self { order, vocab_size, index, rows, theta: vec![0.0; len] })
    }

    /// Dense when the full table fits in `max_params`, hashed otherwise.
    pub fn auto(order: usize, vocab_size: usize, max_params: usize) -> Result<Self, PolicyError> {
        let fits =
            dense_rows(order, vocab_size).and_then(|r| r.checked_mul(vocab_size)).is_some_and(|p| p <= max_params);
        let index = if fits {
            ContextIndex::Dense
        } else {
            ContextIndex::Hashed { buckets: (max_params / vocab_size.max(1)).max(1) }
        };
        Self::new(order, vocab_size, index)
    }

    pub(crate) fn from_parts(
        order: usize,
        vocab_size: usize,
        index: ContextIndex,
        theta: Vec<f64>,
    ) -> Result<Self, PolicyError> {
        let mut m = Self::new(order, vocab_size, index)?;
        if theta.len() != m.theta.len() {
            return Err(PolicyError::Shape(format!("expected {} parameters, got {}", m.theta.len(), theta.len())));
        }
        m.theta = theta;
        Ok(m)
    }

    /// Fill logits with `scale` * N(0, 1).
    pub fn randomize<R: Rng + ?Sized>(&mut self, rng: &mut R, scale: f64) {
        for t in &mut self.theta {
            *t = scale * rng.sample::<f64, _>(StandardNormal);
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn index(&self) -> ContextIndex {
        self.index
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn check_ids(&self, ids: &[u32]) -> Result<(), PolicyError> {
        match ids.iter().find(|&&i| i as usize >= self.vocab_size) {
            Some(&id) => Err(PolicyError::TokenOutOfRange { id, vocab_size: self.vocab_size }),
            None => Ok(()),
        }
    }

    /// Row for a context of exactly `order` tokens.
    pub fn context_row(&self, ctx: &[u32]) -> usize {
        debug_assert_eq!(ctx.len(), self.order);
        match self.index {
            ContextIndex::Dense => ctx.iter().fold(0usize, |acc, &t| acc * self.vocab_size + t as usize),
            ContextIndex::Hashed { buckets } => {
                let h = ctx.iter().fold(mix64(self.order as u64), |acc, &t| mix64(acc ^ u64::from(t)));
                (h % buckets as u64) as usize
            }
        }
    }

    /// Rows used to score each response position given the prompt.
    pub fn response_rows(&self, prompt: &[u32], response: &[u32]) -> Vec<usize> {
        let k = self.order;
        let mut hist: Vec<u32> = Vec::with_capacity(k + prompt.len() + response.len());
        hist.resize(k, BOS);
        hist.extend_from_slice(prompt);
        hist.extend_from_slice(response);
        let p = prompt.len();
        (0..response.len()).map(|t| self.context_row(&hist[p + t..p + t + k])).collect()
    }

    pub fn logits(&self, row: usize) -> &[f64] {
        &self.theta[row * self.vocab_size..(row + 1) * self.vocab_size]
    }

    /// Conditional distribution for a row.
    pub fn probs(&self, row: usize) -> Vec<f64> {
        let l = self.logits(row);
        let lse = log_sum_exp(l);
        l.iter().map(|x| (x - lse).exp()).collect()
    }

    /// Next-token distribution after `history` (which may be shorter than the order).
    pub fn next_distribution(&self, history: &[u32]) -> Vec<f64> {
        self.probs(self.history_row(history))
    }

    fn history_row(&self, history: &[u32]) -> usize {
        let k = self.order;
        let mut ctx = vec![BOS; k];
        let take = history.len().min(k);
        ctx[k - take..].copy_from_slice(&history[history.len() - take..]);
        self.context_row(&ctx)
    }

    /// log pi(response | prompt), summed over response positions only.
    pub fn sequence_log_prob(&self, prompt: &[u32], response: &[u32]) -> Result<f64, PolicyError> {
        self.check_ids(prompt)?;
        self.check_ids(response)?;
        Ok(self
            .response_rows(prompt, response)
            .iter()
            .zip(response)
            .map(|(&row, &y)| {
                let l = self.logits(row);
                l[y as usize] - log_sum_exp(l)
            })
            .sum())
    }

    /// Add `scale * d log pi(response | prompt) / d theta` into `grad`, which
    /// must have the length of theta. Ids must already be checked.
    pub fn add_log_prob_grad(&self, prompt: &[u32], response: &[u32], scale: f64, grad: &mut [f64]) {
        let v = self.vocab_size;
        for (row, &y) in self.response_rows(prompt, response).into_iter().zip(response) {
            let l = self.logits(row);
            let lse = log_sum_exp(l);
            let g = &mut grad[row * v..(row + 1) * v];
            for (gi, li) in g.iter_mut().zip(l) {
                *gi -= scale * (li - lse).exp();
            }
            g[y as usize] += scale;
        }
    }

    /// Argmax continuation, lowest id on ties, stopping at EOS (not included)
    /// or after `max_len` tokens.
    pub fn greedy_decode(&self, prompt: &[u32], max_len: usize) -> Result<Vec<u32>, PolicyError> {
        self.check_ids(prompt)?;
        let mut hist = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_len.max(1) {
            let l = self.logits(self.history_row(&hist));
            let mut best = 0;
            for (i, x) in l.iter().enumerate() {
                if *x > l[best] {
                    best = i;
                }
            }
            let tok = best as u32;
            if tok == EOS {
                break;
            }
            out.push(tok);
            hist.push(tok);
        }
        Ok(out)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Stable ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_model(order: usize, v: usize, seed: u64) -> TabularPolicy {
        let mut m = TabularPolicy::new(order, v, ContextIndex::Dense).unwrap();
        m.randomize(&mut ChaCha8Rng::seed_from_u64(seed), 1.5);
        m
    }

    #[test]
    fn uniform_log_prob() {
        let m = TabularPolicy::new(2, 4, ContextIndex::Dense).unwrap();
        let lp = m.sequence_log_prob(&[3], &[0, 3, 2]).unwrap();
        assert!((lp - 3.0 * (0.25f64).ln()).abs() < 1e-12);
        assert!((lp + 4.158883).abs() < 1e-6);
    }

    #[test]
    fn rows_are_normalized() {
        let m = random_model(2, 7, 3);
        for row in 0..m.rows() {
            let s: f64 = m.probs(row).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let mut h = TabularPolicy::new(3, 9, ContextIndex::Hashed { buckets: 13 }).unwrap();
        h.randomize(&mut ChaCha8Rng::seed_from_u64(1), 2.0);
        for row in 0..h.rows() {
            assert!((h.probs(row).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn chain_rule() {
        let m = random_model(2, 8, 11);
        let (p, r1, r2) = (vec![5u32, 6], vec![7u32, 1], vec![3u32, 3, 2]);
        let whole: Vec<u32> = r1.iter().chain(&r2).copied().collect();
        let joined: Vec<u32> = p.iter().chain(&r1).copied().collect();
        let lhs = m.sequence_log_prob(&p, &whole).unwrap();
        let rhs = m.sequence_log_prob(&p, &r1).unwrap() + m.sequence_log_prob(&joined, &r2).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_token() {
        let m = TabularPolicy::new(1, 6, ContextIndex::Dense).unwrap();
        assert!(matches!(m.sequence_log_prob(&[], &[6]), Err(PolicyError::TokenOutOfRange { id: 6, vocab_size: 6 })));
    }

    #[test]
    fn shift_invariance() {
        let mut m = random_model(1, 6, 2);
        let before = m.sequence_log_prob(&[5], &[4, 3]).unwrap();
        let row = m.context_row(&[5]);
        for x in &mut m.theta_mut()[row * 6..(row + 1) * 6] {
            *x += 17.25;
        }
        assert!((m.sequence_log_prob(&[5], &[4, 3]).unwrap() - before).abs() < 1e-12);
    }

    #[test]
    fn greedy_decode_rules() {
        let m = TabularPolicy::new(2, 6, ContextIndex::Dense).unwrap();
        assert_eq!(m.greedy_decode(&[5], 4).unwrap(), [0, 0, 0, 0]);
        let mut d = TabularPolicy::new(1, 6, ContextIndex::Dense).unwrap();
        // 5 -> 4 -> EOS
        let r5 = d.context_row(&[5]);
        let r4 = d.context_row(&[4]);
        d.theta_mut()[r5 * 6 + 4] = 50.0;
        d.theta_mut()[r4 * 6 + EOS as usize] = 50.0;
        assert_eq!(d.greedy_decode(&[5], 10).unwrap(), [4]);
        assert_eq!(d.greedy_decode(&[5], 10).unwrap(), d.greedy_decode(&[5], 10).unwrap());
    }

    #[test]
    fn auto_switches_to_hashing() {
        assert_eq!(TabularPolicy::auto(2, 10, 1000).unwrap().index(), ContextIndex::Dense);
        assert_eq!(TabularPolicy::auto(3, 10, 1000).unwrap().index(), ContextIndex::Hashed { buckets: 100 });
    }

    #[test]
    fn stable_helpers() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }
}
