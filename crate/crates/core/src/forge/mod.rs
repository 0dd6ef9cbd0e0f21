//! Training-data construction: SFT prompts over SQL plus context, the
//! eight-strategy negative sampler, a chat-completion client, and DPO triple
//! assembly with the SFT overlap guard.

mod generate;
mod prompts;
mod validate;

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::hashing::content_id;

pub use generate::{
    AuditRecord, GenerationClientConfig, GenerationError, Generator, HttpGenerator, RateLimiter, StubGenerator,
};
pub use prompts::{
    build_negative_prompt, build_sft_prompt, pick_strategy, prompt_sql, PromptTarget, Strategy,
    NEGATIVE_TEMPLATE_VERSION, SFT_TEMPLATE_VERSION,
};
pub use validate::{validate_dataset, DatasetKind, IssueKind, ValidationIssue, ValidationOptions, ValidationReport};

#[derive(Debug, thiserror::Error)]
pub enum ForgeError {
    #[error("record has no SQL text")]
    MissingSql,
    #[error("pair {0} has no chosen comment")]
    MissingComment(String),
    #[error(transparent)]
    Generation(#[from] GenerationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    MachineDraft,
    ExpertApproved,
    ExpertEdited,
}

impl ReviewStatus {
    pub fn is_final(self) -> bool {
        !matches!(self, Self::MachineDraft)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommentPair {
    pub id: String,
    pub sql: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
    pub comment: String,
    pub review_status: ReviewStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer_id: Option<String>,
}

impl CommentPair {
    pub fn new(sql: impl Into<String>, comment: impl Into<String>, review_status: ReviewStatus) -> Self {
        let sql = sql.into();
        Self {
            id: content_id(&sql),
            sql,
            question: None,
            schema_text: None,
            evidence: None,
            comment: comment.into(),
            review_status,
            reviewer_id: None,
        }
    }

    /// A machine draft for `record`; the id matches the record id.
    pub fn draft(record: &crate::corpus::SqlRecord, comment: impl Into<String>) -> Self {
        Self {
            id: record.id.clone(),
            sql: record.text.clone(),
            question: record.question.clone(),
            schema_text: record.schema_text.clone(),
            evidence: record.evidence.clone(),
            comment: comment.into(),
            review_status: ReviewStatus::MachineDraft,
            reviewer_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub strategy: Strategy,
    pub source_pair_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    SftOverlap,
    NotReviewed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub id: String,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedPair {
    pub id: String,
    pub strategy: Strategy,
    pub attempts: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoAssembly {
    pub triples: Vec<PreferenceTriple>,
    pub skipped: Vec<SkippedPair>,
    pub failed: Vec<FailedPair>,
}

#[derive(Debug, Clone)]
pub struct AssembleOptions {
    /// Generation attempts per pair when the result equals the chosen comment
    /// or the request fails.
    pub retry_budget: usize,
    pub temperature: f64,
    /// Exemplars placed in the policy prompt `x`.
    pub few_shot: Vec<CommentPair>,
}

impl Default for AssembleOptions {
    fn default() -> Self {
        Self { retry_budget: 3, temperature: 0.7, few_shot: Vec::new() }
    }
}

/// One triple per eligible pair, in input order. Pairs in `sft_ids` and
/// unreviewed drafts are skipped and reported; pairs whose generations keep
/// failing or echoing the chosen comment are reported as failed.
pub fn assemble_dpo_dataset<R: Rng + ?Sized>(
    pairs: &[CommentPair],
    sft_ids: &BTreeSet<String>,
    rng: &mut R,
    generator: &mut dyn Generator,
    opts: &AssembleOptions,
) -> Result<DpoAssembly, ForgeError> {
    let mut out = DpoAssembly::default();
    for pair in pairs {
        if sft_ids.contains(&pair.id) {
            out.skipped.push(SkippedPair { id: pair.id.clone(), reason: SkipReason::SftOverlap });
            continue;
        }
        if !pair.review_status.is_final() {
            out.skipped.push(SkippedPair { id: pair.id.clone(), reason: SkipReason::NotReviewed });
            continue;
        }
        let strategy = pick_strategy(rng);
        let neg_prompt = build_negative_prompt(pair, strategy)?;
        let prompt = build_sft_prompt(PromptTarget::from(pair), &opts.few_shot)?;
        let chosen = pair.comment.trim().to_string();
        let mut last_reason = String::new();
        let mut rejected = None;
        let attempts = opts.retry_budget.max(1);
        for _ in 0..attempts {
            match generator.generate(&neg_prompt, opts.temperature) {
                Ok(text) if text.trim() == chosen => last_reason = "generated text equals the chosen comment".into(),
                Ok(text) => {
                    rejected = Some(text.trim().to_string());
                    break;
                }
                Err(GenerationError::Config { status, body }) => {
                    return Err(GenerationError::Config { status, body }.into());
                }
                Err(e) => last_reason = e.to_string(),
            }
        }
        match rejected {
            Some(rejected) => out.triples.push(PreferenceTriple {
                id: content_id(&format!("{}\u{0}{}\u{0}{}", pair.id, strategy, rejected)),
                prompt,
                chosen,
                rejected,
                strategy,
                source_pair_id: pair.id.clone(),
            }),
            None => {
                log::warn!("pair {}: no usable rejected comment after {attempts} attempts", pair.id);
                out.failed.push(FailedPair { id: pair.id.clone(), strategy, attempts, reason: last_reason });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pairs(n: usize) -> Vec<CommentPair> {
        (0..n)
            .map(|i| {
                CommentPair::new(
                    format!("SELECT c{i} FROM t{i}"),
                    format!("Reads c{i} from t{i}."),
                    ReviewStatus::ExpertApproved,
                )
            })
            .collect()
    }

    #[test]
    fn all_overlapping() {
        let ps = pairs(5);
        let ids: BTreeSet<_> = ps.iter().map(|p| p.id.clone()).collect();
        let mut g = StubGenerator::degrading();
        let out =
            assemble_dpo_dataset(&ps, &ids, &mut ChaCha8Rng::seed_from_u64(0), &mut g, &AssembleOptions::default())
                .unwrap();
        assert!(out.triples.is_empty());
        assert_eq!(out.skipped.len(), 5);
        assert!(out.skipped.iter().all(|s| s.reason == SkipReason::SftOverlap));
    }

    #[test]
    fn ten_clean_pairs() {
        let ps = pairs(10);
        let mut g = StubGenerator::degrading();
        let out = assemble_dpo_dataset(
            &ps,
            &BTreeSet::new(),
            &mut ChaCha8Rng::seed_from_u64(1),
            &mut g,
            &AssembleOptions::default(),
        )
        .unwrap();
        assert_eq!(out.triples.len(), 10);
        for (t, p) in out.triples.iter().zip(&ps) {
            assert_eq!(t.source_pair_id, p.id);
            assert_ne!(t.chosen, t.rejected);
            assert!(t.prompt.contains(&p.sql));
        }
        assert!(out.skipped.is_empty() && out.failed.is_empty());
    }

    #[test]
    fn echoing_generator_exhausts_budget() {
        let ps = pairs(2);
        let chosen = ps[0].comment.clone();
        let mut g = StubGenerator::new(move |_| chosen.clone());
        let opts = AssembleOptions { retry_budget: 4, ..Default::default() };
        let out =
            assemble_dpo_dataset(&ps[..1], &BTreeSet::new(), &mut ChaCha8Rng::seed_from_u64(1), &mut g, &opts).unwrap();
        assert!(out.triples.is_empty());
        assert_eq!(out.failed.len(), 1);
        assert_eq!(out.failed[0].attempts, 4);
        assert_eq!(g.calls(), 4);
    }

    #[test]
    fn drafts_are_not_used() {
        let mut ps = pairs(1);
        ps[0].review_status = ReviewStatus::MachineDraft;
        let mut g = StubGenerator::degrading();
        let out = assemble_dpo_dataset(
            &ps,
            &BTreeSet::new(),
            &mut ChaCha8Rng::seed_from_u64(1),
            &mut g,
            &AssembleOptions::default(),
        )
        .unwrap();
        assert_eq!(out.skipped[0].reason, SkipReason::NotReviewed);
    }

    #[test]
    fn pair_ids_follow_sql() {
        let a = CommentPair::new("SELECT 1", "x", ReviewStatus::MachineDraft);
        let rec = crate::corpus::SqlRecord::new("SELECT 1", crate::corpus::Source::Benchmark);
        assert_eq!(a.id, rec.id);
        assert_eq!(CommentPair::draft(&rec, "y").id, rec.id);
    }
}
