//! Stage bodies with explicit paths. The `run` driver and the standalone
//! subcommands both call into these.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sqlcomment_core::analysis::{construct_tags, extract_features, DifficultyStratum, DifficultyWeights};
use sqlcomment_core::corpus::{self, dedup_fast, kept_records, DedupReport, LshConfig, RawRecord, Source, SqlRecord};
use sqlcomment_core::forge::{
    assemble_dpo_dataset, build_sft_prompt, prompt_sql, validate_dataset, AssembleOptions, CommentPair, DatasetKind,
    Generator, PreferenceTriple, PromptTarget, ReviewStatus, ValidationOptions, ValidationReport,
};
use sqlcomment_core::jsonl;
use sqlcomment_core::metrics::{
    evaluate_corpus, EvalOptions, MeteorConfig, MeteorStage, MetricReport, Smoothing, SynonymTable,
};
use sqlcomment_core::policy::{
    encode_pair, epoch_means, train, write_trace_csv, Checkpoint, DpoExample, ReferenceSnapshot, TabularPolicy,
    TrainConfig, TrainData, Vocabulary, EOS, SEP,
};
use sqlcomment_core::review::{
    aggregate_ratings, distribution_table, error_samples, kappa_from_ratings, KappaMode, RatingRecord,
};

use crate::config::DedupMode;

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    Ok(jsonl::read(path)?)
}

fn write<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(jsonl::write(path, items)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn ingest(input: &Path, output: &Path) -> Result<Value> {
    let raw: Vec<RawRecord> = read(input)?;
    let records = corpus::ingest(raw);
    write(output, &records)?;
    Ok(json!({ "records": records.len() }))
}

pub fn dedup(
    input: &Path,
    output: &Path,
    report: &Path,
    threshold: f64,
    mode: DedupMode,
    lsh: &LshConfig,
) -> Result<DedupReport> {
    let records: Vec<SqlRecord> = read(input)?;
    let rep = match mode {
        DedupMode::Exact => corpus::dedup(&records, threshold)?,
        DedupMode::Fast => dedup_fast(&records, threshold, lsh)?,
    };
    write(output, &kept_records(&records, &rep))?;
    write_json(report, &rep)?;
    Ok(rep)
}

pub fn analyze(input: &Path, output: &Path, weights: &DifficultyWeights) -> Result<Value> {
    let mut records: Vec<SqlRecord> = read(input)?;
    let mut strata: BTreeMap<DifficultyStratum, usize> = BTreeMap::new();
    let mut tags = BTreeMap::new();
    for r in &mut records {
        let f = extract_features(&r.text);
        let s = r.benchmark_difficulty.unwrap_or_else(|| weights.classify(&f));
        let t = construct_tags(&f);
        *strata.entry(s).or_insert(0) += 1;
        for tag in &t {
            *tags.entry(serde_json::to_value(tag)?.as_str().unwrap_or_default().to_string()).or_insert(0usize) += 1;
        }
        r.features = Some(f);
        r.stratum = Some(s);
        r.tags = Some(t);
    }
    write(output, &records)?;
    Ok(json!({ "records": records.len(), "strata": strata, "tags": tags }))
}

pub fn read_pairs(path: &Path) -> Result<Vec<CommentPair>> {
    read(path)
}

/// One machine draft per record, in input order.
pub fn generate_drafts(
    input: &Path,
    few_shot: &[CommentPair],
    generator: &mut dyn Generator,
    temperature: f64,
    output: &Path,
) -> Result<Value> {
    let records: Vec<SqlRecord> = read(input)?;
    let mut drafts = Vec::with_capacity(records.len());
    for r in &records {
        let prompt = build_sft_prompt(PromptTarget::from(r), few_shot)?;
        let comment =
            generator.generate(&prompt, temperature).with_context(|| format!("drafting a comment for {}", r.id))?;
        drafts.push(CommentPair::draft(r, comment.trim()));
    }
    write(output, &drafts)?;
    Ok(json!({ "drafts": drafts.len(), "few_shot": few_shot.len() }))
}

/// Stamp every draft approved. Stands in for expert review in toy runs.
pub fn review_auto(drafts: &Path, output: &Path) -> Result<Value> {
    let mut pairs = read_pairs(drafts)?;
    for p in &mut pairs {
        p.review_status = ReviewStatus::ExpertApproved;
        p.reviewer_id = Some("auto-approve".into());
    }
    write(output, &pairs)?;
    Ok(json!({ "reviewed": pairs.len(), "mode": "auto_approve" }))
}

/// Take reviewed pairs from an annotation export (the JSON body of
/// `/api/export/sft`) or from a line-delimited pair file. Drafts without a
/// final review are left out and counted.
pub fn review_import(drafts: &Path, import: &Path, output: &Path) -> Result<Value> {
    let drafts = read_pairs(drafts)?;
    let text = fs::read_to_string(import).with_context(|| format!("reading {}", import.display()))?;
    let imported: Vec<CommentPair> = match serde_json::from_str::<Value>(&text) {
        Ok(v) if v.get("records").is_some() => serde_json::from_value(v["records"].clone())?,
        _ => read_pairs(import)?,
    };
    let by_id: BTreeMap<&str, &CommentPair> =
        imported.iter().filter(|p| p.review_status.is_final()).map(|p| (p.id.as_str(), p)).collect();
    let reviewed: Vec<CommentPair> =
        drafts.iter().filter_map(|d| by_id.get(d.id.as_str()).map(|p| (*p).clone())).collect();
    let pending = drafts.len() - reviewed.len();
    if pending > 0 {
        log::warn!("{pending} drafts have no final review and are left out");
    }
    write(output, &reviewed)?;
    Ok(json!({ "reviewed": reviewed.len(), "pending": pending, "mode": "import" }))
}

pub struct SplitPaths<'a> {
    pub sft: &'a Path,
    pub dpo_pool: &'a Path,
    pub heldout: &'a Path,
}

/// Seeded three-way split of reviewed pairs into SFT, DPO source pool and
/// held-out evaluation pairs. Each part keeps input order.
pub fn build_sft(
    reviewed: &Path,
    out: &SplitPaths<'_>,
    dpo_share: f64,
    heldout_share: f64,
    seed: u64,
) -> Result<Value> {
    let pairs = read_pairs(reviewed)?;
    if let Some(p) = pairs.iter().find(|p| !p.review_status.is_final()) {
        bail!("pair {} is still a machine draft; every SFT pair needs expert review", p.id);
    }
    let n = pairs.len();
    let n_held = (n as f64 * heldout_share).round() as usize;
    let n_dpo = ((n as f64 * dpo_share).round() as usize).min(n - n_held);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held: BTreeSet<usize> = idx[..n_held].iter().copied().collect();
    let dpo: BTreeSet<usize> = idx[n_held..n_held + n_dpo].iter().copied().collect();
    let pick = |set: &dyn Fn(usize) -> bool| {
        pairs.iter().enumerate().filter(|(i, _)| set(*i)).map(|(_, p)| p.clone()).collect::<Vec<_>>()
    };
    let heldout = pick(&|i| held.contains(&i));
    let pool = pick(&|i| dpo.contains(&i));
    let sft = pick(&|i| !held.contains(&i) && !dpo.contains(&i));
    write(out.sft, &sft)?;
    write(out.dpo_pool, &pool)?;
    write(out.heldout, &heldout)?;
    let report =
        validate_dataset(out.sft, DatasetKind::Sft, &ValidationOptions { other_split: None, require_reviewed: true });
    ensure_valid(&report)?;
    Ok(json!({ "sft": sft.len(), "dpo_pool": pool.len(), "heldout": heldout.len() }))
}

fn ensure_valid(report: &ValidationReport) -> Result<()> {
    if report.is_valid() {
        return Ok(());
    }
    for i in report.issues.iter().take(10) {
        log::error!("{}:{}: {:?}: {}", report.path, i.line, i.kind, i.message);
    }
    bail!("{} failed validation with {} issue(s)", report.path, report.issues.len())
}

/// Ids from a file of pairs (the `id` field) or of bare ids, one per line.
pub fn read_ids(path: &Path) -> Result<BTreeSet<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut ids = BTreeSet::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        match serde_json::from_str::<Value>(line) {
            Ok(v) if v.is_object() => {
                let id = v
                    .get("id")
                    .and_then(Value::as_str)
                    .with_context(|| format!("{}: line without an id", path.display()))?;
                ids.insert(id.to_string());
            }
            _ => {
                ids.insert(line.to_string());
            }
        }
    }
    Ok(ids)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DpoBuildReport {
    pub triples: usize,
    pub skipped: Vec<sqlcomment_core::forge::SkippedPair>,
    pub failed: Vec<sqlcomment_core::forge::FailedPair>,
    pub strategy_counts: BTreeMap<String, usize>,
}

#[allow(clippy::too_many_arguments)]
pub fn build_dpo(
    pool: &Path,
    sft_ids: &Path,
    generator: &mut dyn Generator,
    opts: &AssembleOptions,
    seed: u64,
    output: &Path,
    report: &Path,
) -> Result<DpoBuildReport> {
    let pairs = read_pairs(pool)?;
    let ids = read_ids(sft_ids)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = assemble_dpo_dataset(&pairs, &ids, &mut rng, generator, opts)?;
    write(output, &out.triples)?;
    let check = validate_dataset(
        output,
        DatasetKind::Dpo,
        &ValidationOptions { other_split: Some(sft_ids.to_path_buf()), require_reviewed: false },
    );
    ensure_valid(&check)?;
    let rep = DpoBuildReport {
        triples: out.triples.len(),
        skipped: out.skipped,
        failed: out.failed,
        strategy_counts: check.strategy_counts,
    };
    for s in &rep.skipped {
        log::info!("skipped {}: {:?}", s.id, s.reason);
    }
    write_json(report, &rep)?;
    Ok(rep)
}

const TEXT_FIELDS: [&str; 8] = ["text", "sql", "comment", "question", "evidence", "chosen", "rejected", "reference"];

/// Every text field of every line in a line-delimited JSON file.
pub fn texts_of(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line).with_context(|| format!("parsing {}", path.display()))?;
        for f in TEXT_FIELDS {
            if let Some(s) = v.get(f).and_then(Value::as_str) {
                out.push(s.to_string());
            }
        }
    }
    Ok(out)
}

pub struct CptOptions {
    pub order: usize,
    pub max_params: usize,
    pub vocab_min_count: usize,
    pub vocab_max_size: usize,
    pub text_threshold: f64,
}

/// Continued pretraining from a uniform table. The documents are the SQL
/// texts plus the natural-language context fields of `data`; the latter are
/// deduplicated at `text_threshold`. The vocabulary also covers
/// `vocab_extra` so that later stages see few unknown tokens.
pub fn train_cpt(
    data: &Path,
    vocab_extra: &[PathBuf],
    opts: &CptOptions,
    cfg: &TrainConfig,
    ckpt: &Path,
    trace: &Path,
) -> Result<Value> {
    let records: Vec<SqlRecord> = read(data)?;
    let prose: Vec<SqlRecord> = records
        .iter()
        .flat_map(|r| [r.question.as_deref(), r.evidence.as_deref()])
        .flatten()
        .filter(|t| !t.trim().is_empty())
        .map(|t| SqlRecord::new(t, Source::Documentation))
        .collect();
    let prose_report = corpus::dedup(&prose, opts.text_threshold)?;
    let prose = kept_records(&prose, &prose_report);
    let docs: Vec<&str> =
        records.iter().map(|r| r.text.as_str()).chain(prose.iter().map(|r| r.text.as_str())).collect();

    let mut vocab_texts: Vec<String> = docs.iter().map(|s| s.to_string()).collect();
    for p in vocab_extra {
        vocab_texts.extend(texts_of(p)?);
    }
    let vocab = Vocabulary::build(vocab_texts.iter().map(String::as_str), opts.vocab_min_count, opts.vocab_max_size);
    let seqs: Vec<Vec<u32>> = docs
        .iter()
        .map(|d| {
            let mut s = vocab.encode(d);
            s.push(EOS);
            s
        })
        .filter(|s| s.len() > 1)
        .collect();
    let mut model = TabularPolicy::auto(opts.order, vocab.len(), opts.max_params)?;
    let rows = train(&mut model, TrainData::Cpt(&seqs), cfg)?;
    write_trace_csv(trace, &rows)?;
    Checkpoint { model, vocab }.save(ckpt)?;
    Ok(json!({
        "documents": seqs.len(),
        "prose_dropped": prose_report.dropped.len(),
        "epoch_loss": epoch_means(&rows),
        "steps": rows.len(),
    }))
}

/// Policy prompt for a pair: the SQL tokens then SEP. An order-k table only
/// sees the last k tokens, so the templated instructions would add nothing.
fn policy_prompt(vocab: &Vocabulary, sql: &str) -> Vec<u32> {
    let mut p = vocab.encode(sql);
    p.push(SEP);
    p
}

fn response(vocab: &Vocabulary, text: &str) -> Vec<u32> {
    let mut r = vocab.encode(text);
    r.push(EOS);
    r
}

pub fn train_sft(init: &Path, data: &Path, cfg: &TrainConfig, ckpt: &Path, trace: &Path) -> Result<Value> {
    let Checkpoint { mut model, vocab } = Checkpoint::load(init)?;
    let pairs = read_pairs(data)?;
    let examples: Vec<_> = pairs.iter().map(|p| encode_pair(&vocab, &p.sql, &p.comment)).collect();
    let rows = train(&mut model, TrainData::Sft(&examples), cfg)?;
    write_trace_csv(trace, &rows)?;
    Checkpoint { model, vocab }.save(ckpt)?;
    Ok(json!({ "examples": examples.len(), "epoch_loss": epoch_means(&rows), "steps": rows.len() }))
}

pub fn train_dpo(
    init: &Path,
    reference: &Path,
    data: &Path,
    cfg: &TrainConfig,
    ckpt: &Path,
    trace: &Path,
) -> Result<Value> {
    let Checkpoint { mut model, vocab } = Checkpoint::load(init)?;
    let r = Checkpoint::load(reference)?;
    ensure!(r.vocab == vocab, "reference checkpoint {} uses a different vocabulary", reference.display());
    let reference = ReferenceSnapshot::new(&r.model);
    let triples: Vec<PreferenceTriple> = read(data)?;
    let examples: Vec<DpoExample> = triples
        .iter()
        .map(|t| DpoExample {
            prompt: policy_prompt(&vocab, prompt_sql(&t.prompt).unwrap_or(&t.prompt)),
            chosen: response(&vocab, &t.chosen),
            rejected: response(&vocab, &t.rejected),
        })
        .collect();
    let rows = train(&mut model, TrainData::Dpo { examples: &examples, reference: &reference }, cfg)?;
    write_trace_csv(trace, &rows)?;
    Checkpoint { model, vocab }.save(ckpt)?;
    let margins: Vec<f64> = rows.iter().filter_map(|r| r.margin_mean).collect();
    Ok(json!({
        "examples": examples.len(),
        "epoch_loss": epoch_means(&rows),
        "first_margin": margins.first(),
        "last_margin": margins.last(),
        "steps": rows.len(),
    }))
}

pub fn decode_text(ckpt: &Checkpoint, sql: &str, max_len: usize) -> Result<String> {
    let ids = ckpt.model.greedy_decode(&policy_prompt(&ckpt.vocab, sql), max_len)?;
    Ok(ckpt.vocab.decode(&ids))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub prediction: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Reference {
    pub id: String,
    pub reference: String,
}

/// Greedy predictions of each named checkpoint on the held-out pairs, the
/// aligned references, and one rating task per pair.
pub fn decode_heldout(models: &[(String, PathBuf)], heldout: &Path, max_len: usize, out_dir: &Path) -> Result<Value> {
    let pairs = read_pairs(heldout)?;
    let refs: Vec<Reference> =
        pairs.iter().map(|p| Reference { id: p.id.clone(), reference: p.comment.clone() }).collect();
    write(&out_dir.join("references.jsonl"), &refs)?;
    let mut candidates: Vec<BTreeMap<String, String>> = vec![BTreeMap::new(); pairs.len()];
    for (name, path) in models {
        let ckpt = Checkpoint::load(path)?;
        let mut preds = Vec::with_capacity(pairs.len());
        for (p, c) in pairs.iter().zip(&mut candidates) {
            let text = decode_text(&ckpt, &p.sql, max_len)?;
            c.insert(name.clone(), text.clone());
            preds.push(Prediction { id: p.id.clone(), prediction: text });
        }
        write(&out_dir.join(format!("predictions_{name}.jsonl")), &preds)?;
    }
    let tasks: Vec<_> = pairs
        .iter()
        .zip(candidates)
        .map(|(p, c)| sqlcomment_annotate::RatingTask { item_id: p.id.clone(), sql: p.sql.clone(), candidates: c })
        .collect();
    write(&out_dir.join("rating_tasks.jsonl"), &tasks)?;
    Ok(json!({ "items": pairs.len(), "models": models.iter().map(|m| m.0.clone()).collect::<Vec<_>>() }))
}

pub fn eval_options(
    smoothing: bool,
    stages: &[String],
    synonyms: Option<&Path>,
    per_sample: bool,
) -> Result<EvalOptions> {
    let stages = stages
        .iter()
        .map(|s| match s.as_str() {
            "exact" => Ok(MeteorStage::Exact),
            "stem" => Ok(MeteorStage::Stem),
            "synonym" => Ok(MeteorStage::Synonym),
            other => bail!("unknown METEOR stage {other:?}"),
        })
        .collect::<Result<Vec<_>>>()?;
    let synonyms = match synonyms {
        Some(p) => SynonymTable::load(p)?,
        None => SynonymTable::default(),
    };
    Ok(EvalOptions {
        smoothing: if smoothing { Smoothing::AddOne } else { Smoothing::None },
        meteor: MeteorConfig { stages, synonyms, ..MeteorConfig::default() },
        per_sample,
    })
}

/// Score predictions against references. Per-sample scores, when requested,
/// go to their own line-delimited file instead of the report.
pub fn eval(
    pred: &Path,
    reference: &Path,
    opts: &EvalOptions,
    report: Option<&Path>,
    per_sample: Option<&Path>,
) -> Result<MetricReport> {
    let mut rep = evaluate_corpus(pred, reference, opts)?;
    if let (Some(path), Some(per)) = (per_sample, rep.per_sample.take()) {
        write(path, &per)?;
    }
    if let Some(path) = report {
        write_json(path, &rep)?;
    }
    Ok(rep)
}

/// Distribution table, kappa on the calibration items and the error worklist.
pub fn report(ratings: &Path, calibration: &BTreeSet<String>, mode: KappaMode, out_dir: &Path) -> Result<Value> {
    let ratings: Vec<RatingRecord> = read(ratings)?;
    for (i, r) in ratings.iter().enumerate() {
        r.validate().with_context(|| format!("rating {} ({} / {})", i + 1, r.item_id, r.rater_id))?;
    }
    let aggregated = aggregate_ratings(&ratings, calibration)?;
    fs::create_dir_all(out_dir)?;
    let table = distribution_table(&aggregated);
    fs::write(out_dir.join("distribution.csv"), table.to_csv())?;
    write(&out_dir.join("aggregated.jsonl"), &aggregated)?;
    let errors = error_samples(&aggregated);
    write(&out_dir.join("error_samples.jsonl"), &errors)?;
    let kappa = if calibration.is_empty() {
        log::warn!("no calibration items; kappa not computed");
        Value::Null
    } else {
        serde_json::to_value(kappa_from_ratings(&ratings, calibration, mode)?)?
    };
    write_json(
        &out_dir.join("kappa.json"),
        &json!({ "mode": mode, "calibration_items": calibration.len(), "kappa": kappa }),
    )?;
    Ok(json!({ "ratings": ratings.len(), "aggregated": aggregated.len(), "error_samples": errors.len() }))
}
