use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CommentPair, PreferenceTriple};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Sft,
    Dpo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    Io,
    Malformed,
    DuplicateId,
    EmptyField,
    ChosenEqualsRejected,
    Unreviewed,
    Overlap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    /// 1-based; 0 for file-level problems.
    pub line: usize,
    pub kind: IssueKind,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ValidationOptions {
    /// The opposite split; its ids must not collide with this file's.
    pub other_split: Option<PathBuf>,
    /// Treat machine drafts in an SFT file as errors.
    pub require_reviewed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub path: String,
    pub kind: DatasetKind,
    pub records: usize,
    pub issues: Vec<ValidationIssue>,
    /// DPO only.
    pub strategy_counts: BTreeMap<String, usize>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Ids that matter for overlap: SFT pair ids, or DPO source pair ids.
fn split_ids(path: &Path) -> Result<BTreeSet<String>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut ids = BTreeSet::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| format!("{}: {e}", path.display()))?;
        let id = v.get("source_pair_id").or_else(|| v.get("id")).and_then(|x| x.as_str());
        if let Some(id) = id {
            ids.insert(id.to_string());
        }
    }
    Ok(ids)
}

/// Check every line; problems are collected rather than stopping the scan.
pub fn validate_dataset(path: &Path, kind: DatasetKind, opts: &ValidationOptions) -> ValidationReport {
    let mut report = ValidationReport {
        path: path.display().to_string(),
        kind,
        records: 0,
        issues: Vec::new(),
        strategy_counts: BTreeMap::new(),
    };
    let mut issue = |line, kind, message: String| report.issues.push(ValidationIssue { line, kind, message });
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            issue(0, IssueKind::Io, e.to_string());
            return report;
        }
    };
    let other = match &opts.other_split {
        Some(p) => match split_ids(p) {
            Ok(ids) => ids,
            Err(e) => {
                issue(0, IssueKind::Io, e);
                BTreeSet::new()
            }
        },
        None => BTreeSet::new(),
    };

    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut records = 0;
    let mut strategies = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let n = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (id, overlap_key) = match kind {
            DatasetKind::Sft => match serde_json::from_str::<CommentPair>(line) {
                Ok(p) => {
                    if p.sql.trim().is_empty() {
                        issue(n, IssueKind::EmptyField, "sql is empty".into());
                    }
                    if p.review_status.is_final() && p.comment.trim().is_empty() {
                        issue(n, IssueKind::EmptyField, "reviewed pair has an empty comment".into());
                    }
                    if opts.require_reviewed && !p.review_status.is_final() {
                        issue(n, IssueKind::Unreviewed, format!("pair {} is still a machine draft", p.id));
                    }
                    (p.id.clone(), p.id)
                }
                Err(e) => {
                    issue(n, IssueKind::Malformed, e.to_string());
                    continue;
                }
            },
            DatasetKind::Dpo => match serde_json::from_str::<PreferenceTriple>(line) {
                Ok(t) => {
                    for (name, v) in [("prompt", &t.prompt), ("chosen", &t.chosen), ("rejected", &t.rejected)] {
                        if v.trim().is_empty() {
                            issue(n, IssueKind::EmptyField, format!("{name} is empty"));
                        }
                    }
                    if t.chosen == t.rejected {
                        issue(n, IssueKind::ChosenEqualsRejected, "chosen and rejected are identical".into());
                    }
                    *strategies.entry(t.strategy.name().to_string()).or_insert(0) += 1;
                    (t.id, t.source_pair_id)
                }
                Err(e) => {
                    issue(n, IssueKind::Malformed, e.to_string());
                    continue;
                }
            },
        };
        records += 1;
        if let Some(first) = seen.get(&id) {
            issue(n, IssueKind::DuplicateId, format!("id {id} already used on line {first}"));
        } else {
            seen.insert(id, n);
        }
        if other.contains(&overlap_key) {
            issue(n, IssueKind::Overlap, format!("pair {overlap_key} also appears in the other split"));
        }
    }
    report.records = records;
    report.strategy_counts = strategies;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::{ReviewStatus, Strategy};

    fn write_lines<T: Serialize>(dir: &Path, name: &str, items: &[T]) -> PathBuf {
        let p = dir.join(name);
        crate::jsonl::write(&p, items).unwrap();
        p
    }

    fn sft(n: usize) -> Vec<CommentPair> {
        (0..n)
            .map(|i| CommentPair::new(format!("SELECT {i}"), "Returns a constant.", ReviewStatus::ExpertApproved))
            .collect()
    }

    #[test]
    fn clean_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(dir.path(), "sft.jsonl", &sft(3));
        let r = validate_dataset(&p, DatasetKind::Sft, &ValidationOptions::default());
        assert!(r.is_valid(), "{:?}", r.issues);
        assert_eq!(r.records, 3);
    }

    #[test]
    fn duplicate_reported_at_later_line() {
        let dir = tempfile::tempdir().unwrap();
        let mut items = sft(3);
        items.push(items[1].clone());
        let p = write_lines(dir.path(), "sft.jsonl", &items);
        let r = validate_dataset(&p, DatasetKind::Sft, &ValidationOptions::default());
        assert_eq!(r.issues.len(), 1);
        assert_eq!((r.issues[0].line, r.issues[0].kind), (4, IssueKind::DuplicateId));
    }

    #[test]
    fn malformed_line_does_not_stop_the_scan() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sft.jsonl");
        let good = serde_json::to_string(&sft(1)[0]).unwrap();
        fs::write(&p, format!("{good}\n{{not json\n\n{good}\n")).unwrap();
        let r = validate_dataset(&p, DatasetKind::Sft, &ValidationOptions::default());
        let kinds: Vec<_> = r.issues.iter().map(|i| (i.line, i.kind)).collect();
        assert_eq!(kinds, [(2, IssueKind::Malformed), (4, IssueKind::DuplicateId)]);
    }

    #[test]
    fn overlap_between_splits() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = sft(2);
        let sft_path = write_lines(dir.path(), "sft.jsonl", &pairs);
        let triple = PreferenceTriple {
            id: "t1".into(),
            prompt: "x".into(),
            chosen: "good".into(),
            rejected: "bad".into(),
            strategy: Strategy::Incomplete,
            source_pair_id: pairs[1].id.clone(),
        };
        let mut same = triple.clone();
        same.id = "t2".into();
        same.source_pair_id = "elsewhere".into();
        same.rejected = "good".into();
        let dpo_path = write_lines(dir.path(), "dpo.jsonl", &[triple, same]);
        let opts = ValidationOptions { other_split: Some(sft_path), ..Default::default() };
        let r = validate_dataset(&dpo_path, DatasetKind::Dpo, &opts);
        let kinds: Vec<_> = r.issues.iter().map(|i| (i.line, i.kind)).collect();
        assert_eq!(kinds, [(1, IssueKind::Overlap), (2, IssueKind::ChosenEqualsRejected)]);
        assert_eq!(r.strategy_counts["incomplete"], 2);

        let back = ValidationOptions { other_split: Some(dpo_path), ..Default::default() };
        let r = validate_dataset(&dir.path().join("sft.jsonl"), DatasetKind::Sft, &back);
        assert_eq!(r.issues.iter().filter(|i| i.kind == IssueKind::Overlap).count(), 1);
    }

    #[test]
    fn drafts_only_fail_when_required() {
        let dir = tempfile::tempdir().unwrap();
        let mut items = sft(1);
        items[0].review_status = ReviewStatus::MachineDraft;
        let p = write_lines(dir.path(), "sft.jsonl", &items);
        assert!(validate_dataset(&p, DatasetKind::Sft, &ValidationOptions::default()).is_valid());
        let strict = ValidationOptions { require_reviewed: true, ..Default::default() };
        assert_eq!(validate_dataset(&p, DatasetKind::Sft, &strict).issues[0].kind, IssueKind::Unreviewed);
    }

    #[test]
    fn missing_file() {
        let r = validate_dataset(Path::new("/nonexistent/x.jsonl"), DatasetKind::Dpo, &ValidationOptions::default());
        assert_eq!(r.issues[0].kind, IssueKind::Io);
    }
}
