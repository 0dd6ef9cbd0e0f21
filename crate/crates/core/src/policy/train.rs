use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::TabularPolicy;
use super::objectives::{dpo_sums, lm_sums, sft_sums, DpoExample, ReferenceSnapshot, SftExample};
use super::optim::{AdamW, AdamWConfig};
use super::PolicyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Cpt,
    Sft,
    Dpo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub optimizer: AdamWConfig,
    /// DPO temperature.
    pub beta: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 8,
            grad_accum_steps: 1,
            optimizer: AdamWConfig { lr: 1e-2, ..AdamWConfig::default() },
            beta: 0.1,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    /// Batch sizes, accumulation, learning rate and epochs of the published
    /// 8B runs (`paper-4.5`). Far too slow to be useful at desk scale.
    pub fn published_preset(objective: Objective) -> Self {
        let (batch_size, grad_accum_steps) = match objective {
            Objective::Cpt => (64, 16),
            Objective::Sft => (8, 8),
            Objective::Dpo => (8, 4),
        };
        Self {
            epochs: 3,
            batch_size,
            grad_accum_steps,
            optimizer: AdamWConfig { lr: 1e-5, ..AdamWConfig::default() },
            ..Self::default()
        }
    }

    pub fn preset(name: &str, objective: Objective) -> Option<Self> {
        match name {
            "paper-4.5" => Some(Self::published_preset(objective)),
            "desk" => Some(Self::default()),
            _ => None,
        }
    }

    /// Optimizer steps for `n` examples.
    pub fn horizon(&self, n: usize) -> u64 {
        let micro = n.div_ceil(self.batch_size.max(1));
        (self.epochs * micro.div_ceil(self.grad_accum_steps.max(1))) as u64
    }
}

pub enum TrainData<'a> {
    Cpt(&'a [Vec<u32>]),
    Sft(&'a [SftExample]),
    Dpo { examples: &'a [DpoExample], reference: &'a ReferenceSnapshot },
}

impl TrainData<'_> {
    fn len(&self) -> usize {
        match self {
            Self::Cpt(d) => d.len(),
            Self::Sft(d) => d.len(),
            Self::Dpo { examples, .. } => examples.len(),
        }
    }

    pub fn objective(&self) -> Objective {
        match self {
            Self::Cpt(_) => Objective::Cpt,
            Self::Sft(_) => Objective::Sft,
            Self::Dpo { .. } => Objective::Dpo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    /// Loss on the step's examples before the update.
    pub loss: f64,
    pub margin_mean: Option<f64>,
}

/// Mini-batch AdamW with gradient accumulation. Each optimizer step averages
/// over every example (tokens for CPT) in its accumulation window.
pub fn train(model: &mut TabularPolicy, data: TrainData<'_>, cfg: &TrainConfig) -> Result<Vec<TraceRow>, PolicyError> {
    let n = data.len();
    if n == 0 {
        return Err(PolicyError::EmptyBatch);
    }
    let window = cfg.batch_size.max(1) * cfg.grad_accum_steps.max(1);
    let mut opt = AdamW::new(cfg.optimizer, model.theta().len(), cfg.horizon(n));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::new();
    let mut grad = vec![0.0; model.theta().len()];
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        // the last window of an epoch may hold fewer micro-batches
        for chunk in order.chunks(window) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let (loss_sum, norm, margin) = match &data {
                TrainData::Cpt(d) => {
                    let batch: Vec<Vec<u32>> = chunk.iter().map(|&i| d[i].clone()).collect();
                    let (s, t) = lm_sums(model, &batch, Some(&mut grad))?;
                    (s, t, None)
                }
                TrainData::Sft(d) => {
                    let batch: Vec<SftExample> = chunk.iter().map(|&i| d[i].clone()).collect();
                    let (s, c) = sft_sums(model, &batch, Some(&mut grad))?;
                    (s, c, None)
                }
                TrainData::Dpo { examples, reference } => {
                    let batch: Vec<DpoExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
                    let s = dpo_sums(model, reference, cfg.beta, &batch, Some(&mut grad))?;
                    (s.loss, s.count, Some(s.margin / s.count as f64))
                }
            };
            let loss = loss_sum / norm as f64;
            let step = opt.step_count() + 1;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(PolicyError::Diverged { step, loss });
            }
            let scale = 1.0 / norm as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            let lr = opt.current_lr();
            opt.step(model.theta_mut(), &grad);
            trace.push(TraceRow { step, epoch, lr, loss, margin_mean: margin });
        }
    }
    Ok(trace)
}

/// Mean step loss per epoch, in epoch order.
pub fn epoch_means(trace: &[TraceRow]) -> Vec<f64> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in trace {
        match out.last_mut() {
            Some((e, s, c)) if *e == r.epoch => {
                *s += r.loss;
                *c += 1;
            }
            _ => out.push((r.epoch, r.loss, 1)),
        }
    }
    out.into_iter().map(|(_, s, c)| s / c as f64).collect()
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,epoch,lr,loss,margin_mean\n");
    for r in trace {
        let margin = r.margin_mean.map(|m| format!("{m:.10e}")).unwrap_or_default();
        let _ = writeln!(out, "{},{},{:.10e},{:.10e},{}", r.step, r.epoch, r.lr, r.loss, margin);
    }
    out
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<(), PolicyError> {
    std::fs::write(path, trace_csv(trace))
        .map_err(|source| PolicyError::Io { path: path.display().to_string(), source })
}
