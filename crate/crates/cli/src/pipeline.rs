use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};
use sqlcomment_core::forge::{AssembleOptions, Generator, HttpGenerator, StubGenerator};
use sqlcomment_core::policy::Objective;
use sqlcomment_core::review::AssignmentPlan;

use crate::config::{Backend, LoadedConfig, ReviewMode};
use crate::manifest::{hash_file, manifest_path, FileHash, Manifest};
use crate::stages::{self, CptOptions, SplitPaths};

pub const STAGES: [&str; 13] = [
    "ingest",
    "dedup",
    "analyze",
    "generate",
    "review",
    "build-sft",
    "build-dpo",
    "train-cpt",
    "train-sft",
    "train-dpo",
    "decode",
    "eval",
    "report",
];

#[derive(Debug, Clone)]
struct Input {
    path: PathBuf,
    label: String,
    /// Stage that writes it; `None` for files named in the config.
    producer: Option<&'static str>,
}

#[derive(Debug, Clone)]
pub struct StagePlan {
    pub stage: &'static str,
    inputs: Vec<Input>,
    outputs: Vec<(PathBuf, String)>,
    pub params: Value,
}

impl StagePlan {
    pub fn describe(&self) -> String {
        let mut s = format!("stage {}\n", self.stage);
        for i in &self.inputs {
            let from = i.producer.map_or("config".to_string(), |p| format!("stage {p}"));
            let _ = writeln!(s, "  in   {} ({from})", i.path.display());
        }
        for (p, _) in &self.outputs {
            let _ = writeln!(s, "  out  {}", p.display());
        }
        let _ = writeln!(s, "  params {}", self.params);
        s
    }
}

pub struct Pipeline {
    cfg: LoadedConfig,
    out: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: LoadedConfig) -> Self {
        let out = cfg.out_dir();
        Self { cfg, out }
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn art(&self, rel: &str, producer: &'static str) -> Input {
        Input { path: self.out.join(rel), label: rel.to_string(), producer: Some(producer) }
    }

    fn ext(&self, p: &Path) -> Input {
        Input { path: self.cfg.resolve(p), label: p.display().to_string(), producer: None }
    }

    fn outs(&self, rels: &[&str]) -> Vec<(PathBuf, String)> {
        rels.iter().map(|r| (self.out.join(r), r.to_string())).collect()
    }

    pub fn plan(&self, stage: &str) -> Result<StagePlan> {
        let c = &self.cfg.config;
        let few_shot: Vec<Input> = c.paths.few_shot.iter().map(|p| self.ext(p)).collect();
        let (stage, inputs, outputs, params): (&'static str, Vec<Input>, _, Value) = match stage {
            "ingest" => ("ingest", vec![self.ext(&c.paths.corpus)], self.outs(&["records.jsonl"]), json!({})),
            "dedup" => (
                "dedup",
                vec![self.art("records.jsonl", "ingest")],
                self.outs(&["kept.jsonl", "dedup_report.json"]),
                json!({ "threshold": c.dedup.query_threshold, "mode": c.dedup.mode, "lsh": c.dedup.lsh(c.seed) }),
            ),
            "analyze" => (
                "analyze",
                vec![self.art("kept.jsonl", "dedup")],
                self.outs(&["analyzed.jsonl"]),
                json!({ "weights": c.analyze }),
            ),
            "generate" => (
                "generate",
                [vec![self.art("analyzed.jsonl", "analyze")], few_shot.clone()].concat(),
                self.outs(&["drafts.jsonl"]),
                json!({ "backend": c.generation.backend, "temperature": c.generation.draft_temperature, "model": c.generation.client.model_name }),
            ),
            "review" => {
                let mut inputs = vec![self.art("drafts.jsonl", "generate")];
                if c.review.mode == ReviewMode::Import {
                    let p =
                        c.paths.review_import.as_ref().context("review.mode = \"import\" needs paths.review_import")?;
                    inputs.push(self.ext(p));
                }
                ("review", inputs, self.outs(&["reviewed.jsonl"]), json!({ "mode": c.review.mode }))
            }
            "build-sft" => (
                "build-sft",
                vec![self.art("reviewed.jsonl", "review")],
                self.outs(&["sft.jsonl", "dpo_pool.jsonl", "heldout.jsonl"]),
                json!({ "dpo_share": c.review.dpo_share, "heldout_share": c.review.heldout_share }),
            ),
            "build-dpo" => (
                "build-dpo",
                [vec![self.art("dpo_pool.jsonl", "build-sft"), self.art("sft.jsonl", "build-sft")], few_shot.clone()]
                    .concat(),
                self.outs(&["dpo.jsonl", "dpo_report.json"]),
                json!({
                    "backend": c.generation.backend,
                    "temperature": c.generation.rejected_temperature,
                    "retry_budget": c.generation.retry_budget,
                }),
            ),
            "train-cpt" => (
                "train-cpt",
                vec![
                    self.art("kept.jsonl", "dedup"),
                    self.art("sft.jsonl", "build-sft"),
                    self.art("dpo.jsonl", "build-dpo"),
                ],
                self.outs(&["cpt.ckpt", "cpt_trace.csv"]),
                json!({
                    "train": c.training.train_config(Objective::Cpt, c.seed)?,
                    "order": c.training.order,
                    "max_params": c.training.max_params,
                    "vocab_min_count": c.training.vocab_min_count,
                    "vocab_max_size": c.training.vocab_max_size,
                    "text_threshold": c.dedup.text_threshold,
                }),
            ),
            "train-sft" => (
                "train-sft",
                vec![self.art("cpt.ckpt", "train-cpt"), self.art("sft.jsonl", "build-sft")],
                self.outs(&["sft.ckpt", "sft_trace.csv"]),
                json!({ "train": c.training.train_config(Objective::Sft, c.seed)? }),
            ),
            "train-dpo" => (
                "train-dpo",
                vec![self.art("sft.ckpt", "train-sft"), self.art("dpo.jsonl", "build-dpo")],
                self.outs(&["dpo.ckpt", "dpo_trace.csv"]),
                json!({ "train": c.training.train_config(Objective::Dpo, c.seed)? }),
            ),
            "decode" => (
                "decode",
                vec![
                    self.art("sft.ckpt", "train-sft"),
                    self.art("dpo.ckpt", "train-dpo"),
                    self.art("heldout.jsonl", "build-sft"),
                ],
                self.outs(&[
                    "references.jsonl",
                    "predictions_sft.jsonl",
                    "predictions_dpo.jsonl",
                    "rating_tasks.jsonl",
                ]),
                json!({ "max_len": c.decode.max_len }),
            ),
            "eval" => {
                let mut inputs = vec![
                    self.art("predictions_sft.jsonl", "decode"),
                    self.art("predictions_dpo.jsonl", "decode"),
                    self.art("references.jsonl", "decode"),
                ];
                inputs.extend(c.paths.synonyms.iter().map(|p| self.ext(p)));
                let mut outs = vec!["metrics_sft.json", "metrics_dpo.json"];
                if c.metrics.per_sample {
                    outs.extend(["per_sample_sft.jsonl", "per_sample_dpo.jsonl"]);
                }
                ("eval", inputs, self.outs(&outs), json!({ "metrics": c.metrics }))
            }
            "report" => {
                let p = c.paths.ratings.as_ref().context("the report stage needs paths.ratings")?;
                let mut inputs = vec![self.ext(p)];
                inputs.extend(c.paths.plan.iter().map(|p| self.ext(p)));
                (
                    "report",
                    inputs,
                    self.outs(&[
                        "report/distribution.csv",
                        "report/aggregated.jsonl",
                        "report/error_samples.jsonl",
                        "report/kappa.json",
                    ]),
                    json!({ "kappa_mode": c.report.kappa_mode }),
                )
            }
            other => bail!("unknown stage {other:?}; stages are {}", STAGES.join(", ")),
        };
        Ok(StagePlan { stage, inputs, outputs, params })
    }

    fn generator(&self) -> Result<Box<dyn Generator>> {
        let g = &self.cfg.config.generation;
        Ok(match g.backend {
            Backend::Stub => Box::new(StubGenerator::degrading()),
            Backend::Http => {
                let mut client = g.client.clone();
                client.audit_log = client.audit_log.map(|p| self.cfg.resolve(&p));
                Box::new(HttpGenerator::new(client)?)
            }
        })
    }

    fn few_shot(&self) -> Result<Vec<sqlcomment_core::forge::CommentPair>> {
        match &self.cfg.config.paths.few_shot {
            Some(p) => stages::read_pairs(&self.cfg.resolve(p)),
            None => Ok(Vec::new()),
        }
    }

    fn calibration(&self) -> Result<BTreeSet<String>> {
        let Some(p) = &self.cfg.config.paths.plan else { return Ok(BTreeSet::new()) };
        let path = self.cfg.resolve(p);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let plan: AssignmentPlan =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(plan.calibration.into_iter().collect())
    }

    /// Run one stage: check inputs and overwrite rules, do the work, write the manifest.
    pub fn run_stage(&self, stage: &str, force: bool, dry_run: bool) -> Result<Option<Manifest>> {
        let plan = self.plan(stage)?;
        if dry_run {
            print!("{}", plan.describe());
            return Ok(None);
        }
        for i in &plan.inputs {
            if !i.path.is_file() {
                match i.producer {
                    Some(p) => {
                        bail!("stage {stage} needs {} (written by stage {p}); run that stage first", i.path.display())
                    }
                    None => bail!("stage {stage} needs {}, which does not exist", i.path.display()),
                }
            }
        }
        let manifest = manifest_path(&self.out, plan.stage);
        if !force {
            for p in plan.outputs.iter().map(|(p, _)| p).chain([&manifest]) {
                if p.exists() {
                    bail!("{} already exists; pass --force to rerun {stage} or use a fresh out_dir", p.display());
                }
            }
        }
        std::fs::create_dir_all(&self.out)?;
        let summary = self.execute(&plan)?;
        let hash = |path: &Path, label: &str, external: bool| -> Result<FileHash> {
            Ok(FileHash { path: label.to_string(), sha256: hash_file(path)?, external })
        };
        let m = Manifest {
            stage: plan.stage.to_string(),
            config_sha256: self.cfg.hash(),
            seed: self.cfg.config.seed,
            params: plan.params.clone(),
            summary,
            inputs: plan.inputs.iter().map(|i| hash(&i.path, &i.label, i.producer.is_none())).collect::<Result<_>>()?,
            outputs: plan.outputs.iter().map(|(p, l)| hash(p, l, false)).collect::<Result<_>>()?,
        };
        m.write(&self.out)?;
        Ok(Some(m))
    }

    fn execute(&self, plan: &StagePlan) -> Result<Value> {
        let c = &self.cfg.config;
        let o = |rel: &str| self.out.join(rel);
        let seed = c.seed;
        Ok(match plan.stage {
            "ingest" => stages::ingest(&plan.inputs[0].path, &o("records.jsonl"))?,
            "dedup" => {
                let r = stages::dedup(
                    &o("records.jsonl"),
                    &o("kept.jsonl"),
                    &o("dedup_report.json"),
                    c.dedup.query_threshold,
                    c.dedup.mode,
                    &c.dedup.lsh(seed),
                )?;
                json!({ "kept": r.kept.len(), "dropped": r.dropped.len() })
            }
            "analyze" => stages::analyze(&o("kept.jsonl"), &o("analyzed.jsonl"), &c.analyze)?,
            "generate" => {
                let mut g = self.generator()?;
                stages::generate_drafts(
                    &o("analyzed.jsonl"),
                    &self.few_shot()?,
                    g.as_mut(),
                    c.generation.draft_temperature,
                    &o("drafts.jsonl"),
                )?
            }
            "review" => match c.review.mode {
                ReviewMode::AutoApprove => stages::review_auto(&o("drafts.jsonl"), &o("reviewed.jsonl"))?,
                ReviewMode::Import => {
                    stages::review_import(&o("drafts.jsonl"), &plan.inputs[1].path, &o("reviewed.jsonl"))?
                }
            },
            "build-sft" => stages::build_sft(
                &o("reviewed.jsonl"),
                &SplitPaths { sft: &o("sft.jsonl"), dpo_pool: &o("dpo_pool.jsonl"), heldout: &o("heldout.jsonl") },
                c.review.dpo_share,
                c.review.heldout_share,
                seed,
            )?,
            "build-dpo" => {
                let mut g = self.generator()?;
                let opts = AssembleOptions {
                    retry_budget: c.generation.retry_budget,
                    temperature: c.generation.rejected_temperature,
                    few_shot: self.few_shot()?,
                };
                let r = stages::build_dpo(
                    &o("dpo_pool.jsonl"),
                    &o("sft.jsonl"),
                    g.as_mut(),
                    &opts,
                    seed,
                    &o("dpo.jsonl"),
                    &o("dpo_report.json"),
                )?;
                json!({ "triples": r.triples, "skipped": r.skipped.len(), "failed": r.failed.len(), "strategies": r.strategy_counts })
            }
            "train-cpt" => {
                let t = &c.training;
                stages::train_cpt(
                    &o("kept.jsonl"),
                    &[o("sft.jsonl"), o("dpo.jsonl")],
                    &CptOptions {
                        order: t.order,
                        max_params: t.max_params,
                        vocab_min_count: t.vocab_min_count,
                        vocab_max_size: t.vocab_max_size,
                        text_threshold: c.dedup.text_threshold,
                    },
                    &t.train_config(Objective::Cpt, seed)?,
                    &o("cpt.ckpt"),
                    &o("cpt_trace.csv"),
                )?
            }
            "train-sft" => stages::train_sft(
                &o("cpt.ckpt"),
                &o("sft.jsonl"),
                &c.training.train_config(Objective::Sft, seed)?,
                &o("sft.ckpt"),
                &o("sft_trace.csv"),
            )?,
            "train-dpo" => stages::train_dpo(
                &o("sft.ckpt"),
                &o("sft.ckpt"),
                &o("dpo.jsonl"),
                &c.training.train_config(Objective::Dpo, seed)?,
                &o("dpo.ckpt"),
                &o("dpo_trace.csv"),
            )?,
            "decode" => stages::decode_heldout(
                &[("sft".into(), o("sft.ckpt")), ("dpo".into(), o("dpo.ckpt"))],
                &o("heldout.jsonl"),
                c.decode.max_len,
                &self.out,
            )?,
            "eval" => {
                let m = &c.metrics;
                let syn = c.paths.synonyms.as_ref().map(|p| self.cfg.resolve(p));
                let opts = stages::eval_options(m.smoothing, &m.meteor_stages, syn.as_deref(), m.per_sample)?;
                let mut out = serde_json::Map::new();
                for name in ["sft", "dpo"] {
                    let per = m.per_sample.then(|| o(&format!("per_sample_{name}.jsonl")));
                    let r = stages::eval(
                        &o(&format!("predictions_{name}.jsonl")),
                        &o("references.jsonl"),
                        &opts,
                        Some(&o(&format!("metrics_{name}.json"))),
                        per.as_deref(),
                    )?;
                    println!("{name:>4}  {}", r.summary_line());
                    out.insert(name.into(), json!(r.summary_line()));
                }
                Value::Object(out)
            }
            "report" => stages::report(&plan.inputs[0].path, &self.calibration()?, c.report.kappa_mode, &o("report"))?,
            other => unreachable!("planned stage {other}"),
        })
    }

    /// Every stage in order. The report stage is skipped when no ratings file is configured.
    pub fn run_all(&self, force: bool, dry_run: bool) -> Result<Vec<Manifest>> {
        let mut out = Vec::new();
        for stage in STAGES {
            if stage == "report" && self.cfg.config.paths.ratings.is_none() {
                log::info!("skipping report: paths.ratings is not set");
                continue;
            }
            log::info!("stage {stage}");
            if let Some(m) = self.run_stage(stage, force, dry_run)? {
                out.push(m);
            }
        }
        Ok(out)
    }
}
