use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use sqlcomment_annotate::{Rater, RatingTask, Store, StoreInputs, SystemClock};
use sqlcomment_core::forge::PreferenceTriple;
use sqlcomment_core::jsonl;
use sqlcomment_core::review::AssignmentPlan;

use crate::config::LoadedConfig;

fn optional<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if path.is_file() {
        Ok(jsonl::read(path)?)
    } else {
        Ok(Vec::new())
    }
}

pub fn data_dir(cfg: &LoadedConfig) -> PathBuf {
    cfg.out_dir().join(&cfg.config.serve.data_dir)
}

/// Queue contents from whatever the run directory holds so far: drafts for
/// review, preference pairs for validation, and rating tasks with the plan.
pub fn open_store(cfg: &LoadedConfig) -> Result<Store> {
    let c = &cfg.config;
    let out = cfg.out_dir();
    if c.serve.raters.is_empty() {
        bail!("serve.raters is empty; list each rater's id and token in the config");
    }
    let raters: Vec<Rater> =
        c.serve.raters.iter().map(|r| Rater { id: r.id.clone(), token: r.token.clone() }).collect();
    let drafts = optional(&out.join("drafts.jsonl"))?;
    let triples: Vec<PreferenceTriple> = optional(&out.join("dpo.jsonl"))?;
    let rating_tasks: Vec<RatingTask> = optional(&out.join("rating_tasks.jsonl"))?;
    let plan = match &c.paths.plan {
        Some(p) if cfg.resolve(p).is_file() => {
            let path = cfg.resolve(p);
            let text = std::fs::read_to_string(&path)?;
            Some(serde_json::from_str::<AssignmentPlan>(&text).with_context(|| format!("parsing {}", path.display()))?)
        }
        _ => None,
    };
    let (rating_tasks, plan) = match plan {
        Some(p) => (rating_tasks, Some(p)),
        None => {
            if !rating_tasks.is_empty() {
                log::warn!("rating tasks present but no assignment plan configured; rating is disabled");
            }
            (Vec::new(), None)
        }
    };
    let inputs = StoreInputs { drafts, triples, rating_tasks, plan, blind_seed: c.serve.blind_seed.unwrap_or(c.seed) };
    let lease = c.serve.lease_minutes * 60_000;
    Ok(Store::open(&data_dir(cfg), &raters, lease, inputs, Arc::new(SystemClock))?)
}
