//! The three training objectives and their exact gradients. Only response
//! tokens are scored; prompts are conditioned on.

use serde::{Deserialize, Serialize};

use super::model::{sigmoid, softplus, TabularPolicy};
use super::PolicyError;

/// Frozen copy of the policy used as pi_ref. There is no mutable access.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSnapshot(TabularPolicy);

impl ReferenceSnapshot {
    pub fn new(model: &TabularPolicy) -> Self {
        Self(model.clone())
    }

    pub fn policy(&self) -> &TabularPolicy {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoExample {
    pub prompt: Vec<u32>,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
}

fn check_beta(beta: f64) -> Result<(), PolicyError> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(PolicyError::Beta(beta))
    }
}

/// Mean negative log-likelihood per token over every position of every
/// sequence (each sequence is scored from an empty prompt).
pub fn lm_loss(model: &TabularPolicy, batch: &[Vec<u32>]) -> Result<f64, PolicyError> {
    let (sum, tokens) = lm_sums(model, batch, None)?;
    Ok(sum / tokens as f64)
}

/// Returns (total NLL, token count) and optionally adds d(total NLL) into `grad`.
pub(crate) fn lm_sums(
    model: &TabularPolicy,
    batch: &[Vec<u32>],
    mut grad: Option<&mut [f64]>,
) -> Result<(f64, usize), PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let mut sum = 0.0;
    let mut tokens = 0;
    for seq in batch {
        sum -= model.sequence_log_prob(&[], seq)?;
        tokens += seq.len();
        if let Some(g) = grad.as_deref_mut() {
            model.add_log_prob_grad(&[], seq, -1.0, g);
        }
    }
    if tokens == 0 {
        return Err(PolicyError::EmptyBatch);
    }
    Ok((sum, tokens))
}

/// (1/|batch|) * sum over pairs of the per-example token NLL sum.
pub fn sft_loss(model: &TabularPolicy, batch: &[SftExample]) -> Result<f64, PolicyError> {
    let (sum, n) = sft_sums(model, batch, None)?;
    Ok(sum / n as f64)
}

pub(crate) fn sft_sums(
    model: &TabularPolicy,
    batch: &[SftExample],
    mut grad: Option<&mut [f64]>,
) -> Result<(f64, usize), PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let mut sum = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        if ex.response.is_empty() {
            return Err(PolicyError::EmptyResponse(i));
        }
        sum -= model.sequence_log_prob(&ex.prompt, &ex.response)?;
        if let Some(g) = grad.as_deref_mut() {
            model.add_log_prob_grad(&ex.prompt, &ex.response, -1.0, g);
        }
    }
    Ok((sum, batch.len()))
}

/// beta * (log pi(y|x) - log pi_ref(y|x)); the log Z(x) term is never formed.
pub fn implicit_reward(
    model: &TabularPolicy,
    reference: &ReferenceSnapshot,
    beta: f64,
    prompt: &[u32],
    response: &[u32],
) -> Result<f64, PolicyError> {
    Ok(beta * (model.sequence_log_prob(prompt, response)? - reference.policy().sequence_log_prob(prompt, response)?))
}

/// beta * (chosen log-ratio - rejected log-ratio).
pub fn dpo_margin(
    model: &TabularPolicy,
    reference: &ReferenceSnapshot,
    beta: f64,
    ex: &DpoExample,
) -> Result<f64, PolicyError> {
    Ok(implicit_reward(model, reference, beta, &ex.prompt, &ex.chosen)?
        - implicit_reward(model, reference, beta, &ex.prompt, &ex.rejected)?)
}

/// Mean over the batch of -log sigmoid(margin), computed as softplus(-margin).
pub fn dpo_loss(
    model: &TabularPolicy,
    reference: &ReferenceSnapshot,
    beta: f64,
    batch: &[DpoExample],
) -> Result<f64, PolicyError> {
    let s = dpo_sums(model, reference, beta, batch, None)?;
    Ok(s.loss / s.count as f64)
}

/// Analytic gradient of [`dpo_loss`].
pub fn dpo_grad(
    model: &TabularPolicy,
    reference: &ReferenceSnapshot,
    beta: f64,
    batch: &[DpoExample],
) -> Result<Vec<f64>, PolicyError> {
    let mut g = vec![0.0; model.theta().len()];
    let s = dpo_sums(model, reference, beta, batch, Some(&mut g))?;
    let n = s.count as f64;
    g.iter_mut().for_each(|x| *x /= n);
    Ok(g)
}

pub(crate) struct DpoSums {
    pub loss: f64,
    pub margin: f64,
    pub count: usize,
}

pub(crate) fn dpo_sums(
    model: &TabularPolicy,
    reference: &ReferenceSnapshot,
    beta: f64,
    batch: &[DpoExample],
    mut grad: Option<&mut [f64]>,
) -> Result<DpoSums, PolicyError> {
    check_beta(beta)?;
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    if reference.policy().theta().len() != model.theta().len() {
        return Err(PolicyError::Shape("reference and policy parameter counts differ".into()));
    }
    let mut out = DpoSums { loss: 0.0, margin: 0.0, count: batch.len() };
    for ex in batch {
        let m = dpo_margin(model, reference, beta, ex)?;
        out.loss += softplus(-m);
        out.margin += m;
        if let Some(g) = grad.as_deref_mut() {
            // d softplus(-m)/dm = -sigmoid(-m)
            let w = -sigmoid(-m) * beta;
            model.add_log_prob_grad(&ex.prompt, &ex.chosen, w, g);
            model.add_log_prob_grad(&ex.prompt, &ex.rejected, -w, g);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::model::ContextIndex;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(seed: u64, order: usize, v: usize) -> TabularPolicy {
        let mut m = TabularPolicy::new(order, v, ContextIndex::Dense).unwrap();
        m.randomize(&mut ChaCha8Rng::seed_from_u64(seed), 1.0);
        m
    }

    fn seq(rng: &mut ChaCha8Rng, v: usize, len: usize) -> Vec<u32> {
        (0..len).map(|_| rng.random_range(0..v as u32)).collect()
    }

    fn triples(seed: u64, v: usize, n: usize) -> Vec<DpoExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| DpoExample {
                prompt: seq(&mut rng, v, 3),
                chosen: seq(&mut rng, v, 4),
                rejected: seq(&mut rng, v, 2),
            })
            .collect()
    }

    #[test]
    fn uniform_closed_forms() {
        let m = TabularPolicy::new(2, 4, ContextIndex::Dense).unwrap();
        let lm = lm_loss(&m, &[vec![0, 1, 2], vec![3]]).unwrap();
        assert!((lm - 4f64.ln()).abs() < 1e-12);
        let sft = sft_loss(&m, &[SftExample { prompt: vec![1], response: vec![2, 3, 0] }]).unwrap();
        assert!((sft - 3.0 * 4f64.ln()).abs() < 1e-12);
        assert!((sft - 4.158883).abs() < 1e-6);
    }

    #[test]
    fn sft_mean_over_examples() {
        let m = random_model(1, 2, 6);
        let batch = vec![
            SftExample { prompt: vec![1], response: vec![2, 3] },
            SftExample { prompt: vec![4, 5], response: vec![0] },
        ];
        let doubled: Vec<_> = batch.iter().chain(&batch).cloned().collect();
        assert!((sft_loss(&m, &batch).unwrap() - sft_loss(&m, &doubled).unwrap()).abs() < 1e-12);
        let manual = -(m.sequence_log_prob(&[1], &[2, 3]).unwrap() + m.sequence_log_prob(&[4, 5], &[0]).unwrap()) / 2.0;
        assert!((sft_loss(&m, &batch).unwrap() - manual).abs() < 1e-12);
        assert!(matches!(
            sft_loss(&m, &[SftExample { prompt: vec![1], response: vec![] }]),
            Err(PolicyError::EmptyResponse(0))
        ));
        assert!(matches!(sft_loss(&m, &[]), Err(PolicyError::EmptyBatch)));
    }

    #[test]
    fn lm_loss_order_invariant() {
        let m = random_model(2, 2, 6);
        let a = vec![vec![1, 2, 3], vec![4, 4]];
        let b = vec![vec![4, 4], vec![1, 2, 3]];
        assert!((lm_loss(&m, &a).unwrap() - lm_loss(&m, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn reward_identities() {
        let m = random_model(3, 2, 6);
        let r = ReferenceSnapshot::new(&m);
        assert_eq!(implicit_reward(&m, &r, 0.1, &[1], &[2, 3]).unwrap(), 0.0);
        let other = random_model(4, 2, 6);
        let a = implicit_reward(&other, &r, 0.1, &[1], &[2, 3]).unwrap();
        let b = implicit_reward(&other, &r, 0.2, &[1], &[2, 3]).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
        let direct =
            0.1 * (other.sequence_log_prob(&[1], &[2, 3]).unwrap() - m.sequence_log_prob(&[1], &[2, 3]).unwrap());
        assert!((a - direct).abs() < 1e-12);
    }

    #[test]
    fn dpo_at_reference_is_ln2() {
        let m = random_model(5, 2, 7);
        let r = ReferenceSnapshot::new(&m);
        let l = dpo_loss(&m, &r, 0.5, &triples(1, 7, 9)).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dpo_scalar_value() {
        // beta 0.1, chosen log-ratio +1, rejected -1 => margin 0.2
        assert!((softplus(-0.2) - 0.598139).abs() < 1e-6);
    }

    #[test]
    fn zero_grad_when_chosen_equals_rejected() {
        let m = random_model(6, 2, 6);
        let r = ReferenceSnapshot::new(&m);
        let b = vec![DpoExample { prompt: vec![1], chosen: vec![2, 3], rejected: vec![2, 3] }];
        assert!(dpo_grad(&m, &r, 0.1, &b).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn grad_matches_finite_differences() {
        let m = random_model(7, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut reference = m.clone();
        reference.randomize(&mut rng, 1.0);
        let r = ReferenceSnapshot::new(&reference);
        let batch = triples(9, 5, 4);
        let g = dpo_grad(&m, &r, 0.5, &batch).unwrap();
        let h = 1e-5;
        for (i, &gi) in g.iter().enumerate() {
            let mut p = m.clone();
            p.theta_mut()[i] += h;
            let mut q = m.clone();
            q.theta_mut()[i] -= h;
            let fd = (dpo_loss(&p, &r, 0.5, &batch).unwrap() - dpo_loss(&q, &r, 0.5, &batch).unwrap()) / (2.0 * h);
            assert!((fd - gi).abs() <= 1e-4 * fd.abs().max(1e-6) + 1e-9, "coord {i}: fd {fd} analytic {gi}");
        }
    }

    #[test]
    fn duplicated_batch_same_grad() {
        let m = random_model(10, 2, 5);
        let r = ReferenceSnapshot::new(&random_model(11, 2, 5));
        let b = triples(12, 5, 3);
        let d: Vec<_> = b.iter().chain(&b).cloned().collect();
        let (g1, g2) = (dpo_grad(&m, &r, 0.1, &b).unwrap(), dpo_grad(&m, &r, 0.1, &d).unwrap());
        assert!(g1.iter().zip(&g2).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn small_step_raises_margin() {
        let m = random_model(13, 2, 6);
        let r = ReferenceSnapshot::new(&m);
        let b = triples(14, 6, 5);
        let mean_margin = |p: &TabularPolicy| b.iter().map(|e| dpo_margin(p, &r, 0.1, e).unwrap()).sum::<f64>() / 5.0;
        let g = dpo_grad(&m, &r, 0.1, &b).unwrap();
        let mut stepped = m.clone();
        for (t, gi) in stepped.theta_mut().iter_mut().zip(&g) {
            *t -= 1e-4 * gi;
        }
        assert!(mean_margin(&stepped) > mean_margin(&m));
    }

    #[test]
    fn bad_beta() {
        let m = random_model(15, 1, 5);
        let r = ReferenceSnapshot::new(&m);
        assert!(matches!(dpo_loss(&m, &r, 0.0, &triples(1, 5, 1)), Err(PolicyError::Beta(_))));
    }
}
