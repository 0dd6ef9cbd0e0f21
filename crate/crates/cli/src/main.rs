use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use sqlcomment_cli::config::{Backend, DedupMode, LoadedConfig};
use sqlcomment_cli::pipeline::{Pipeline, STAGES};
use sqlcomment_cli::{annotation, stages};
use sqlcomment_core::corpus::LshConfig;
use sqlcomment_core::forge::{
    validate_dataset, AssembleOptions, DatasetKind, Generator, HttpGenerator, StubGenerator, ValidationOptions,
};
use sqlcomment_core::policy::{Checkpoint, Objective, TrainConfig};
use sqlcomment_core::review::{assign_rater_pairs, assign_rater_pairs_with_remainder, AssignmentPlan, KappaMode};

#[derive(Parser)]
#[command(name = "sqlcomment", version, about = "SQL comment generation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Exact,
    Fast,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Sft,
    Dpo,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportKind {
    Sft,
    Dpo,
    Ratings,
}

#[derive(Subcommand)]
enum Command {
    /// Raw records to normalized records with ids and token sets.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Near-duplicate removal by token-set Jaccard similarity.
    Dedup {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        #[arg(long, value_enum, default_value = "fast")]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
        /// Kept records; defaults to `<input>.kept.jsonl`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Add features, difficulty stratum and construct tags.
    Analyze {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Draft one comment per record with the configured generator.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        few_shot: Option<PathBuf>,
    },
    /// Split reviewed pairs into SFT, DPO source and held-out files.
    BuildSft {
        #[arg(long)]
        reviewed: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        dpo_share: f64,
        #[arg(long, default_value_t = 0.1)]
        heldout_share: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Preference triples from pairs not used for SFT.
    BuildDpo {
        #[arg(long)]
        pairs: PathBuf,
        /// SFT file or list of SFT pair ids.
        #[arg(long)]
        sft_ids: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Pipeline config for the generation backend; the stub is used without one.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        few_shot: Option<PathBuf>,
    },
    /// Check an SFT or DPO file.
    Validate {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        input: PathBuf,
        /// The other split, for overlap detection.
        #[arg(long)]
        other: Option<PathBuf>,
        #[arg(long)]
        require_reviewed: bool,
    },
    /// Run the annotation service.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        port: Option<u16>,
    },
    /// Write an annotation export without the service running.
    Export {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        kind: ExportKind,
        #[arg(long)]
        output: PathBuf,
    },
    /// Rater assignment plan: calibration items for everyone, the rest split over rater pairs.
    Plan {
        /// File of item ids, or of JSON lines with an `id` field.
        #[arg(long)]
        items: PathBuf,
        #[arg(long, value_delimiter = ',')]
        raters: Vec<String>,
        #[arg(long, default_value_t = 30)]
        calibration: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Append an uneven remainder to the last subset instead of failing.
        #[arg(long)]
        allow_remainder: bool,
        #[arg(long)]
        output: PathBuf,
    },
    /// Next-token pretraining on SQL and question text; builds the vocabulary.
    TrainCpt {
        #[command(flatten)]
        common: TrainArgs,
        /// Extra files whose text fields seed the vocabulary.
        #[arg(long)]
        vocab_text: Vec<PathBuf>,
    },
    /// Supervised fine-tuning on reviewed comment pairs.
    TrainSft {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long)]
        init: PathBuf,
    },
    /// Preference optimisation against a frozen reference.
    TrainDpo {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long)]
        init: PathBuf,
        /// Frozen reference; defaults to the initial checkpoint.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Greedy comment for one SQL text.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
    },
    /// BLEU-4, METEOR and ROUGE-L of predictions against references.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        per_sample: Option<PathBuf>,
        /// JSON report path.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        synonyms: Option<PathBuf>,
        #[arg(long)]
        no_smoothing: bool,
    },
    /// Distribution table, kappa and error worklist from a ratings log.
    Report {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Assignment plan naming the calibration items.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        per_metric: bool,
    },
    /// Run one pipeline stage, or `all`, from a config file.
    Run {
        stage: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        dry_run: bool,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Pipeline config; its `training` section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn train_setup(args: &TrainArgs, objective: Objective) -> Result<(TrainConfig, Option<LoadedConfig>)> {
    let loaded = args.config.as_deref().map(LoadedConfig::load).transpose()?;
    let cfg = match &loaded {
        Some(l) => l.config.training.train_config(objective, args.seed)?,
        None => TrainConfig { seed: args.seed, ..TrainConfig::default() },
    };
    std::fs::create_dir_all(&args.out)?;
    Ok((cfg, loaded))
}

fn generator_from(config: Option<&Path>) -> Result<Box<dyn Generator>> {
    let Some(path) = config else { return Ok(Box::new(StubGenerator::degrading())) };
    let l = LoadedConfig::load(path)?;
    Ok(match l.config.generation.backend {
        Backend::Stub => Box::new(StubGenerator::degrading()),
        Backend::Http => {
            let mut client = l.config.generation.client.clone();
            client.audit_log = client.audit_log.map(|p| l.resolve(&p));
            Box::new(HttpGenerator::new(client)?)
        }
    })
}

fn read_plan(path: &Path) -> Result<AssignmentPlan> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Ingest { input, output } => print_json(&stages::ingest(&input, &output)?)?,
        Command::Dedup { input, threshold, mode, seed, report, output } => {
            let output = output.unwrap_or_else(|| input.with_extension("kept.jsonl"));
            let mode = match mode {
                Mode::Exact => DedupMode::Exact,
                Mode::Fast => DedupMode::Fast,
            };
            let r = stages::dedup(&input, &output, &report, threshold, mode, &LshConfig::with_seed(seed))?;
            println!("kept {} dropped {} at threshold {}", r.kept.len(), r.dropped.len(), r.threshold);
        }
        Command::Analyze { input, output } => {
            print_json(&stages::analyze(&input, &output, &Default::default())?)?;
        }
        Command::Generate { config, input, output, few_shot } => {
            let l = LoadedConfig::load(&config)?;
            let shots = few_shot.as_deref().map(stages::read_pairs).transpose()?.unwrap_or_default();
            let mut g = generator_from(Some(&config))?;
            print_json(&stages::generate_drafts(
                &input,
                &shots,
                g.as_mut(),
                l.config.generation.draft_temperature,
                &output,
            )?)?;
        }
        Command::BuildSft { reviewed, out_dir, dpo_share, heldout_share, seed } => {
            let paths = stages::SplitPaths {
                sft: &out_dir.join("sft.jsonl"),
                dpo_pool: &out_dir.join("dpo_pool.jsonl"),
                heldout: &out_dir.join("heldout.jsonl"),
            };
            print_json(&stages::build_sft(&reviewed, &paths, dpo_share, heldout_share, seed)?)?;
        }
        Command::BuildDpo { pairs, sft_ids, seed, output, report, config, few_shot } => {
            let mut g = generator_from(config.as_deref())?;
            let mut opts = AssembleOptions {
                few_shot: few_shot.as_deref().map(stages::read_pairs).transpose()?.unwrap_or_default(),
                ..Default::default()
            };
            if let Some(c) = &config {
                let l = LoadedConfig::load(c)?;
                opts.retry_budget = l.config.generation.retry_budget;
                opts.temperature = l.config.generation.rejected_temperature;
            }
            let r = stages::build_dpo(&pairs, &sft_ids, g.as_mut(), &opts, seed, &output, &report)?;
            println!("{} triples, {} skipped, {} failed", r.triples, r.skipped.len(), r.failed.len());
        }
        Command::Validate { kind, input, other, require_reviewed } => {
            let kind = match kind {
                Kind::Sft => DatasetKind::Sft,
                Kind::Dpo => DatasetKind::Dpo,
            };
            let r = validate_dataset(&input, kind, &ValidationOptions { other_split: other, require_reviewed });
            print_json(&r)?;
            if !r.is_valid() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Serve { config, port } => {
            let l = LoadedConfig::load(&config)?;
            let port = port.unwrap_or(l.config.serve.port);
            let store = Arc::new(Mutex::new(annotation::open_store(&l)?));
            let addr = SocketAddr::from(([0, 0, 0, 0], port));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(sqlcomment_annotate::server::serve(store, addr))?;
        }
        Command::Export { config, kind, output } => {
            let l = LoadedConfig::load(&config)?;
            let store = annotation::open_store(&l)?;
            let text = match kind {
                ExportKind::Sft => serde_json::to_string_pretty(&store.export_sft())?,
                ExportKind::Dpo => serde_json::to_string_pretty(&store.export_dpo())?,
                ExportKind::Ratings => {
                    // the ratings log is line-delimited, as the report stage reads it
                    let e = store.export_ratings();
                    e.records
                        .iter()
                        .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
                        .collect::<Result<String, _>>()?
                }
            };
            std::fs::write(&output, text)?;
        }
        Command::Plan { items, raters, calibration, seed, allow_remainder, output } => {
            let ids: Vec<String> = stages::read_ids(&items)?.into_iter().collect();
            if calibration > ids.len() {
                bail!("{calibration} calibration items requested but only {} items given", ids.len());
            }
            let cal: BTreeSet<String> = ids[..calibration].iter().cloned().collect();
            let plan = if allow_remainder {
                assign_rater_pairs_with_remainder(&ids, &raters, &cal, seed)?
            } else {
                assign_rater_pairs(&ids, &raters, &cal, seed)?
            };
            stages::write_json(&output, &plan)?;
        }
        Command::TrainCpt { common, vocab_text } => {
            let (cfg, loaded) = train_setup(&common, Objective::Cpt)?;
            let t = loaded.as_ref().map(|l| l.config.training.clone()).unwrap_or_default();
            let text_threshold = loaded.as_ref().map_or(0.8, |l| l.config.dedup.text_threshold);
            let opts = stages::CptOptions {
                order: t.order,
                max_params: t.max_params,
                vocab_min_count: t.vocab_min_count,
                vocab_max_size: t.vocab_max_size,
                text_threshold,
            };
            let s = stages::train_cpt(
                &common.data,
                &vocab_text,
                &opts,
                &cfg,
                &common.out.join("cpt.ckpt"),
                &common.out.join("cpt_trace.csv"),
            )?;
            print_json(&s)?;
        }
        Command::TrainSft { common, init } => {
            let (cfg, _) = train_setup(&common, Objective::Sft)?;
            print_json(&stages::train_sft(
                &init,
                &common.data,
                &cfg,
                &common.out.join("sft.ckpt"),
                &common.out.join("sft_trace.csv"),
            )?)?;
        }
        Command::TrainDpo { common, init, reference } => {
            let (cfg, _) = train_setup(&common, Objective::Dpo)?;
            let reference = reference.unwrap_or_else(|| init.clone());
            let s = stages::train_dpo(
                &init,
                &reference,
                &common.data,
                &cfg,
                &common.out.join("dpo.ckpt"),
                &common.out.join("dpo_trace.csv"),
            )?;
            print_json(&s)?;
        }
        Command::Decode { ckpt, prompt, max_len } => {
            let c = Checkpoint::load(&ckpt)?;
            println!("{}", stages::decode_text(&c, &prompt, max_len)?);
        }
        Command::Eval { pred, reference, per_sample, report, synonyms, no_smoothing } => {
            let stages_list = if synonyms.is_some() { vec!["exact", "stem", "synonym"] } else { vec!["exact", "stem"] };
            let stages_list: Vec<String> = stages_list.into_iter().map(String::from).collect();
            let opts = stages::eval_options(!no_smoothing, &stages_list, synonyms.as_deref(), per_sample.is_some())?;
            let r = stages::eval(&pred, &reference, &opts, report.as_deref(), per_sample.as_deref())?;
            println!("{}", r.summary_line());
        }
        Command::Report { ratings, out, plan, per_metric } => {
            let cal: BTreeSet<String> = match plan {
                Some(p) => read_plan(&p)?.calibration.into_iter().collect(),
                None => BTreeSet::new(),
            };
            let mode = if per_metric { KappaMode::PerMetric } else { KappaMode::Pooled };
            print_json(&stages::report(&ratings, &cal, mode, &out)?)?;
        }
        Command::Run { stage, config, force, dry_run } => {
            let p = Pipeline::new(LoadedConfig::load(&config)?);
            if stage == "all" {
                let ms = p.run_all(force, dry_run)?;
                if !dry_run {
                    println!("{} stages done; manifests in {}", ms.len(), p.out_dir().join("manifests").display());
                }
            } else if STAGES.contains(&stage.as_str()) {
                if p.run_stage(&stage, force, dry_run)?.is_some() {
                    println!("{stage} done");
                }
            } else {
                bail!("unknown stage {stage:?}; expected all or one of {}", STAGES.join(", "));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
