use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sqlcomment_core::forge::{prompt_sql, CommentPair, PreferenceTriple, ReviewStatus};
use sqlcomment_core::review::{blind_aliases, check_score, AssignmentPlan, RatingRecord};

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
    }
}

/// Settable clock for tests and scripted runs.
#[derive(Clone, Default)]
pub struct ManualClock(Arc<AtomicU64>);

impl ManualClock {
    pub fn new(ms: u64) -> Self {
        Self(Arc::new(AtomicU64::new(ms)))
    }

    pub fn set(&self, ms: u64) {
        self.0.store(ms, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkKind {
    RefineComment,
    ValidatePair,
    RateComment,
}

impl WorkKind {
    pub const ALL: [WorkKind; 3] = [Self::RefineComment, Self::ValidatePair, Self::RateComment];

    pub fn name(self) -> &'static str {
        match self {
            Self::RefineComment => "refine_comment",
            Self::ValidatePair => "validate_pair",
            Self::RateComment => "rate_comment",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemState {
    Open,
    Claimed,
    Done,
}

/// What a rater sees. Rating payloads carry only the blinded alias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    RefineComment {
        sql: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        question: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none")]
        schema_text: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none")]
        evidence: Option<String>,
        draft: String,
    },
    ValidatePair {
        sql: String,
        chosen: String,
        rejected: String,
    },
    RateComment {
        item_id: String,
        alias: String,
        sql: String,
        comment: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkItem {
    pub id: String,
    pub kind: WorkKind,
    pub payload: Payload,
    /// State as seen by the requesting rater.
    pub state: ItemState,
    pub claimed_by: Option<String>,
    pub lease_expiry: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SubmissionBody {
    /// Accept the draft as written.
    Approve,
    Edit {
        comment: String,
    },
    PairValid,
    FlagInvalid {
        reason: String,
    },
    Rating {
        correctness: u8,
        completeness: u8,
        naturalness: u8,
    },
}

impl SubmissionBody {
    fn kind(&self) -> WorkKind {
        match self {
            Self::Approve | Self::Edit { .. } => WorkKind::RefineComment,
            Self::PairValid | Self::FlagInvalid { .. } => WorkKind::ValidatePair,
            Self::Rating { .. } => WorkKind::RateComment,
        }
    }
}

/// One line of a per-kind submission log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub item_id: String,
    pub rater_id: String,
    pub body: SubmissionBody,
    pub received_at: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("unknown rater {0}")]
    UnknownRater(String),
    #[error("not permitted: {0}")]
    Forbidden(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid submission: {0}")]
    Validation(String),
    #[error("no such item {0}")]
    NotFound(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: corrupt log entry: {message}")]
    CorruptLog { path: String, line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rater {
    pub id: String,
    pub token: String,
}

/// One evaluation item with a comment from each system under test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingTask {
    pub item_id: String,
    pub sql: String,
    /// model id -> comment
    pub candidates: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default)]
pub struct StoreInputs {
    pub drafts: Vec<CommentPair>,
    pub triples: Vec<PreferenceTriple>,
    pub rating_tasks: Vec<RatingTask>,
    pub plan: Option<AssignmentPlan>,
    pub blind_seed: u64,
}

struct Item {
    kind: WorkKind,
    payload: Payload,
    /// Primary rating items: the two planned raters. Calibration: everyone.
    /// Other kinds: anyone.
    allowed: Option<BTreeSet<String>>,
    /// Accepted submissions needed to finish the item.
    capacity: usize,
    /// rate items: the real model id behind the alias.
    model_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KindProgress {
    pub total: usize,
    pub done: usize,
    pub submissions: usize,
    pub per_rater: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Export<T> {
    pub kind: WorkKind,
    /// Log entries the snapshot was built from.
    pub log_entries: usize,
    pub records: Vec<T>,
    /// Item ids left out, with the reason.
    pub excluded: Vec<(String, String)>,
}

/// Work queues, claims and the append-only submission logs. Not thread safe
/// on its own; the server wraps it in a mutex so every claim and submit is
/// linearizable.
pub struct Store {
    data_dir: PathBuf,
    lease_ms: u64,
    clock: Arc<dyn Clock>,
    raters: BTreeMap<String, String>,
    items: BTreeMap<String, Item>,
    drafts: BTreeMap<String, CommentPair>,
    triples: BTreeMap<String, PreferenceTriple>,
    /// (item, rater) -> lease expiry
    claims: HashMap<(String, String), u64>,
    log: BTreeMap<WorkKind, Vec<Submission>>,
    accepted: HashMap<String, Vec<String>>,
    files: BTreeMap<WorkKind, File>,
}

impl Store {
    pub fn open(
        data_dir: &Path,
        raters: &[Rater],
        lease_ms: u64,
        inputs: StoreInputs,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, StoreError> {
        let io = |source| StoreError::Io { path: data_dir.display().to_string(), source };
        fs::create_dir_all(data_dir).map_err(io)?;
        let mut store = Self {
            data_dir: data_dir.to_path_buf(),
            lease_ms,
            clock,
            raters: raters.iter().map(|r| (r.token.clone(), r.id.clone())).collect(),
            items: BTreeMap::new(),
            drafts: BTreeMap::new(),
            triples: BTreeMap::new(),
            claims: HashMap::new(),
            log: BTreeMap::new(),
            accepted: HashMap::new(),
            files: BTreeMap::new(),
        };
        store.load_inputs(inputs, raters)?;
        for kind in WorkKind::ALL {
            store.replay(kind)?;
            let path = store.log_path(kind);
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|source| StoreError::Io { path: path.display().to_string(), source })?;
            store.files.insert(kind, file);
        }
        Ok(store)
    }

    fn load_inputs(&mut self, inputs: StoreInputs, raters: &[Rater]) -> Result<(), StoreError> {
        for d in inputs.drafts {
            self.items.insert(
                d.id.clone(),
                Item {
                    kind: WorkKind::RefineComment,
                    payload: Payload::RefineComment {
                        sql: d.sql.clone(),
                        question: d.question.clone(),
                        schema_text: d.schema_text.clone(),
                        evidence: d.evidence.clone(),
                        draft: d.comment.clone(),
                    },
                    allowed: None,
                    capacity: 1,
                    model_id: None,
                },
            );
            self.drafts.insert(d.id.clone(), d);
        }
        for t in inputs.triples {
            let sql = prompt_sql(&t.prompt).unwrap_or(&t.prompt).to_string();
            self.items.insert(
                t.id.clone(),
                Item {
                    kind: WorkKind::ValidatePair,
                    payload: Payload::ValidatePair { sql, chosen: t.chosen.clone(), rejected: t.rejected.clone() },
                    allowed: None,
                    capacity: 1,
                    model_id: None,
                },
            );
            self.triples.insert(t.id.clone(), t);
        }
        if inputs.rating_tasks.is_empty() {
            return Ok(());
        }
        let plan = inputs.plan.ok_or_else(|| StoreError::Validation("rating tasks need an assignment plan".into()))?;
        let everyone: BTreeSet<String> = raters.iter().map(|r| r.id.clone()).collect();
        let calibration: BTreeSet<&String> = plan.calibration.iter().collect();
        let mut pair_of: HashMap<&str, BTreeSet<String>> = HashMap::new();
        for p in &plan.pairs {
            for item in &p.items {
                pair_of.insert(item, BTreeSet::from([p.raters.0.clone(), p.raters.1.clone()]));
            }
        }
        let ids: Vec<String> = inputs.rating_tasks.iter().map(|t| t.item_id.clone()).collect();
        let models: BTreeSet<String> = inputs.rating_tasks.iter().flat_map(|t| t.candidates.keys().cloned()).collect();
        let models: Vec<String> = models.into_iter().collect();
        let aliases = blind_aliases(&ids, &models, inputs.blind_seed);
        for task in inputs.rating_tasks {
            let (allowed, capacity) = if calibration.contains(&task.item_id) {
                (everyone.clone(), everyone.len())
            } else {
                let pair = pair_of.get(task.item_id.as_str()).ok_or_else(|| {
                    StoreError::Validation(format!("item {} is not in the assignment plan", task.item_id))
                })?;
                (pair.clone(), 2)
            };
            for (alias, model) in &aliases[&task.item_id] {
                let Some(comment) = task.candidates.get(model) else { continue };
                self.items.insert(
                    format!("{}:{alias}", task.item_id),
                    Item {
                        kind: WorkKind::RateComment,
                        payload: Payload::RateComment {
                            item_id: task.item_id.clone(),
                            alias: alias.clone(),
                            sql: task.sql.clone(),
                            comment: comment.clone(),
                        },
                        allowed: Some(allowed.clone()),
                        capacity,
                        model_id: Some(model.clone()),
                    },
                );
            }
        }
        Ok(())
    }

    fn log_path(&self, kind: WorkKind) -> PathBuf {
        self.data_dir.join(format!("{}.jsonl", kind.name()))
    }

    /// Rebuild the index from a log. A final line without its newline is the
    /// remains of an interrupted write and is dropped.
    fn replay(&mut self, kind: WorkKind) -> Result<(), StoreError> {
        let path = self.log_path(kind);
        let display = path.display().to_string();
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
            Err(source) => return Err(StoreError::Io { path: display, source }),
        };
        let complete = match text.rfind('\n') {
            Some(i) => &text[..=i],
            None => "",
        };
        if complete.len() != text.len() {
            log::warn!("{display}: dropping a partial trailing entry");
            fs::write(&path, complete).map_err(|source| StoreError::Io { path: display.clone(), source })?;
        }
        for (i, line) in complete.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let s: Submission = serde_json::from_str(line).map_err(|e| StoreError::CorruptLog {
                path: display.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
            self.accepted.entry(s.item_id.clone()).or_default().push(s.rater_id.clone());
            self.log.entry(kind).or_default().push(s);
        }
        Ok(())
    }

    pub fn rater_for_token(&self, token: &str) -> Option<&str> {
        self.raters.get(token).map(String::as_str)
    }

    fn known_rater(&self, rater: &str) -> Result<(), StoreError> {
        if self.raters.values().any(|r| r == rater) {
            Ok(())
        } else {
            Err(StoreError::UnknownRater(rater.to_string()))
        }
    }

    fn done_by(&self, item: &str, rater: &str) -> bool {
        self.accepted.get(item).is_some_and(|v| v.iter().any(|r| r == rater))
    }

    fn finished(&self, id: &str, item: &Item) -> bool {
        self.accepted.get(id).map_or(0, Vec::len) >= item.capacity
    }

    /// Live claim on a single-capacity item held by someone other than `rater`.
    fn blocked_for(&self, id: &str, item: &Item, rater: &str, now: u64) -> bool {
        item.capacity == 1 && self.claims.iter().any(|((i, r), &exp)| i == id && r != rater && exp > now)
    }

    fn view(&self, id: &str, item: &Item, rater: &str) -> WorkItem {
        let lease = self.claims.get(&(id.to_string(), rater.to_string())).copied();
        let state = if self.done_by(id, rater) || self.finished(id, item) {
            ItemState::Done
        } else if lease.is_some() {
            ItemState::Claimed
        } else {
            ItemState::Open
        };
        WorkItem {
            id: id.to_string(),
            kind: item.kind,
            payload: item.payload.clone(),
            state,
            claimed_by: lease.map(|_| rater.to_string()),
            lease_expiry: lease,
        }
    }

    /// Claim the lowest-id item of `kind` this rater may work on. A rater
    /// polling again while holding a live lease gets the same item back.
    pub fn next_item(&mut self, rater: &str, kind: WorkKind) -> Result<Option<WorkItem>, StoreError> {
        self.known_rater(rater)?;
        let now = self.clock.now_ms();
        let mut pick = None;
        for (id, item) in &self.items {
            if item.kind != kind
                || self.done_by(id, rater)
                || self.finished(id, item)
                || item.allowed.as_ref().is_some_and(|a| !a.contains(rater))
                || self.blocked_for(id, item, rater, now)
            {
                continue;
            }
            pick = Some(id.clone());
            break;
        }
        let Some(id) = pick else { return Ok(None) };
        // expired claims by others on this item are void now
        self.claims.retain(|(i, r), exp| !(i == &id && r != rater && *exp <= now));
        self.claims.insert((id.clone(), rater.to_string()), now + self.lease_ms);
        Ok(Some(self.view(&id, &self.items[&id], rater)))
    }

    pub fn submit(&mut self, item_id: &str, rater: &str, body: SubmissionBody) -> Result<(), StoreError> {
        self.known_rater(rater)?;
        let item = self.items.get(item_id).ok_or_else(|| StoreError::NotFound(item_id.to_string()))?;
        if body.kind() != item.kind {
            return Err(StoreError::Validation(format!(
                "a {:?} body cannot complete a {} item",
                body.kind(),
                item.kind.name()
            )));
        }
        if item.allowed.as_ref().is_some_and(|a| !a.contains(rater)) {
            return Err(StoreError::Forbidden(format!("rater {rater} is not assigned to item {item_id}")));
        }
        match &body {
            SubmissionBody::Rating { correctness, completeness, naturalness } => {
                for s in [correctness, completeness, naturalness] {
                    check_score(*s).map_err(|e| StoreError::Validation(e.to_string()))?;
                }
            }
            SubmissionBody::Edit { comment } if comment.trim().is_empty() => {
                return Err(StoreError::Validation("edited comment is empty".into()));
            }
            SubmissionBody::FlagInvalid { reason } if reason.trim().is_empty() => {
                return Err(StoreError::Validation("an invalid-pair flag needs a reason".into()));
            }
            _ => {}
        }
        if self.done_by(item_id, rater) {
            return Err(StoreError::Conflict(format!("rater {rater} already submitted item {item_id}")));
        }
        if self.finished(item_id, item) {
            return Err(StoreError::Conflict(format!("item {item_id} is already complete")));
        }
        let key = (item_id.to_string(), rater.to_string());
        if !self.claims.contains_key(&key) {
            return Err(StoreError::Conflict(format!("rater {rater} holds no claim on item {item_id}")));
        }
        let kind = item.kind;
        let s = Submission {
            item_id: item_id.to_string(),
            rater_id: rater.to_string(),
            body,
            received_at: self.clock.now_ms(),
        };
        let mut line = serde_json::to_string(&s).expect("submission serializes");
        line.push('\n');
        let path = self.log_path(kind);
        let file = self.files.get_mut(&kind).expect("log open for every kind");
        // one write per entry so a crash leaves at most one partial line
        file.write_all(line.as_bytes())
            .and_then(|_| file.sync_data())
            .map_err(|source| StoreError::Io { path: path.display().to_string(), source })?;
        self.claims.remove(&key);
        self.accepted.entry(s.item_id.clone()).or_default().push(s.rater_id.clone());
        self.log.entry(kind).or_default().push(s);
        Ok(())
    }

    pub fn progress(&self) -> BTreeMap<WorkKind, KindProgress> {
        let mut out = BTreeMap::new();
        for kind in WorkKind::ALL {
            let items: Vec<_> = self.items.iter().filter(|(_, i)| i.kind == kind).collect();
            let mut per_rater = BTreeMap::new();
            let subs = self.log.get(&kind).map_or(&[][..], Vec::as_slice);
            for s in subs {
                *per_rater.entry(s.rater_id.clone()).or_insert(0) += 1;
            }
            out.insert(
                kind,
                KindProgress {
                    total: items.len(),
                    done: items.iter().filter(|(id, i)| self.finished(id, i)).count(),
                    submissions: subs.len(),
                    per_rater,
                },
            );
        }
        out
    }

    fn entries(&self, kind: WorkKind) -> &[Submission] {
        self.log.get(&kind).map_or(&[][..], Vec::as_slice)
    }

    /// Reviewed pairs only, in id order.
    pub fn export_sft(&self) -> Export<CommentPair> {
        let subs = self.entries(WorkKind::RefineComment);
        let by_item: HashMap<&str, &Submission> = subs.iter().map(|s| (s.item_id.as_str(), s)).collect();
        let mut records = Vec::new();
        let mut excluded = Vec::new();
        for (id, draft) in &self.drafts {
            match by_item.get(id.as_str()) {
                Some(s) => {
                    let mut p = draft.clone();
                    match &s.body {
                        SubmissionBody::Edit { comment } => {
                            p.comment = comment.clone();
                            p.review_status = ReviewStatus::ExpertEdited;
                        }
                        _ => p.review_status = ReviewStatus::ExpertApproved,
                    }
                    p.reviewer_id = Some(s.rater_id.clone());
                    records.push(p);
                }
                None => excluded.push((id.clone(), "not reviewed".to_string())),
            }
        }
        Export { kind: WorkKind::RefineComment, log_entries: subs.len(), records, excluded }
    }

    /// Pairs confirmed valid; flagged and pending pairs are listed as excluded.
    pub fn export_dpo(&self) -> Export<PreferenceTriple> {
        let subs = self.entries(WorkKind::ValidatePair);
        let by_item: HashMap<&str, &Submission> = subs.iter().map(|s| (s.item_id.as_str(), s)).collect();
        let mut records = Vec::new();
        let mut excluded = Vec::new();
        for (id, t) in &self.triples {
            match by_item.get(id.as_str()).map(|s| &s.body) {
                Some(SubmissionBody::PairValid) => records.push(t.clone()),
                Some(SubmissionBody::FlagInvalid { reason }) => {
                    excluded.push((id.clone(), format!("flagged invalid: {reason}")))
                }
                _ => excluded.push((id.clone(), "not validated".to_string())),
            }
        }
        Export { kind: WorkKind::ValidatePair, log_entries: subs.len(), records, excluded }
    }

    /// Ratings in log order with real model ids restored.
    pub fn export_ratings(&self) -> Export<RatingRecord> {
        let subs = self.entries(WorkKind::RateComment);
        let mut records = Vec::new();
        for s in subs {
            let (Some(item), SubmissionBody::Rating { correctness, completeness, naturalness }) =
                (self.items.get(&s.item_id), &s.body)
            else {
                continue;
            };
            let Payload::RateComment { item_id, .. } = &item.payload else { continue };
            records.push(RatingRecord {
                item_id: item_id.clone(),
                rater_id: s.rater_id.clone(),
                model_id: item.model_id.clone().unwrap_or_default(),
                correctness: *correctness,
                completeness: *completeness,
                naturalness: *naturalness,
                timestamp: s.received_at,
            });
        }
        Export { kind: WorkKind::RateComment, log_entries: subs.len(), records, excluded: Vec::new() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sqlcomment_core::review::assign_rater_pairs;

    fn raters(n: usize) -> Vec<Rater> {
        (0..n).map(|i| Rater { id: format!("r{i}"), token: format!("tok{i}") }).collect()
    }

    fn drafts(n: usize) -> Vec<CommentPair> {
        (0..n)
            .map(|i| {
                let mut p =
                    CommentPair::new(format!("SELECT {i}"), format!("Returns {i}."), ReviewStatus::MachineDraft);
                p.id = format!("d{i:02}");
                p
            })
            .collect()
    }

    fn open(dir: &Path, inputs: StoreInputs, clock: &ManualClock) -> Store {
        Store::open(dir, &raters(6), 30 * 60_000, inputs, Arc::new(clock.clone())).unwrap()
    }

    #[test]
    fn empty_queue() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = open(dir.path(), StoreInputs::default(), &ManualClock::new(0));
        assert!(s.next_item("r0", WorkKind::RefineComment).unwrap().is_none());
        assert!(matches!(s.next_item("nobody", WorkKind::RefineComment), Err(StoreError::UnknownRater(_))));
        let e = s.export_sft();
        assert!(e.records.is_empty() && e.excluded.is_empty());
        assert_eq!(e.log_entries, 0);
    }

    #[test]
    fn claims_are_exclusive_until_the_lease_expires() {
        let dir = tempfile::tempdir().unwrap();
        let clock = ManualClock::new(1_000);
        let mut s = open(dir.path(), StoreInputs { drafts: drafts(2), ..Default::default() }, &clock);
        let a = s.next_item("r0", WorkKind::RefineComment).unwrap().unwrap();
        let b = s.next_item("r1", WorkKind::RefineComment).unwrap().unwrap();
        assert_eq!((a.id.as_str(), b.id.as_str()), ("d00", "d01"));
        assert!(s.next_item("r2", WorkKind::RefineComment).unwrap().is_none());
        // repolling returns the held item
        assert_eq!(s.next_item("r0", WorkKind::RefineComment).unwrap().unwrap().id, "d00");
        clock.advance(30 * 60_000 + 1);
        let c = s.next_item("r2", WorkKind::RefineComment).unwrap().unwrap();
        assert_eq!(c.id, "d00");
        // r0 lost the lease to r2
        assert!(matches!(s.submit("d00", "r0", SubmissionBody::Approve), Err(StoreError::Conflict(_))));
        s.submit("d00", "r2", SubmissionBody::Approve).unwrap();
    }

    #[test]
    fn refine_round_trip_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let clock = ManualClock::new(5);
        let inputs = || StoreInputs { drafts: drafts(3), ..Default::default() };
        {
            let mut s = open(dir.path(), inputs(), &clock);
            let it = s.next_item("r0", WorkKind::RefineComment).unwrap().unwrap();
            s.submit(&it.id, "r0", SubmissionBody::Edit { comment: "Returns zero.".into() }).unwrap();
            let it = s.next_item("r0", WorkKind::RefineComment).unwrap().unwrap();
            s.submit(&it.id, "r0", SubmissionBody::Approve).unwrap();
            assert!(matches!(s.submit("d00", "r0", SubmissionBody::Approve), Err(StoreError::Conflict(_))));
        }
        let s = open(dir.path(), inputs(), &clock);
        let e = s.export_sft();
        assert_eq!(e.records.len(), 2);
        assert_eq!(e.records[0].review_status, ReviewStatus::ExpertEdited);
        assert_eq!(e.records[0].comment, "Returns zero.");
        assert_eq!(e.records[1].review_status, ReviewStatus::ExpertApproved);
        assert_eq!(e.records[1].reviewer_id.as_deref(), Some("r0"));
        assert_eq!(e.excluded, [("d02".to_string(), "not reviewed".to_string())]);
    }

    #[test]
    fn partial_trailing_line_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let clock = ManualClock::new(5);
        let inputs = || StoreInputs { drafts: drafts(2), ..Default::default() };
        {
            let mut s = open(dir.path(), inputs(), &clock);
            s.next_item("r0", WorkKind::RefineComment).unwrap();
            s.submit("d00", "r0", SubmissionBody::Approve).unwrap();
        }
        let log = dir.path().join("refine_comment.jsonl");
        let mut f = OpenOptions::new().append(true).open(&log).unwrap();
        f.write_all(br#"{"item_id":"d01","rater_id":"r1","bo"#).unwrap();
        drop(f);
        let mut s = open(dir.path(), inputs(), &clock);
        assert_eq!(s.export_sft().records.len(), 1);
        // the crashed item is still available
        assert_eq!(s.next_item("r1", WorkKind::RefineComment).unwrap().unwrap().id, "d01");
        s.submit("d01", "r1", SubmissionBody::Approve).unwrap();
        assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 2);
    }

    fn rating_setup(dir: &Path, clock: &ManualClock) -> Store {
        let ids: Vec<String> = (0..8).map(|i| format!("q{i}")).collect();
        let cal = BTreeSet::from(["q0".to_string(), "q1".to_string()]);
        let rater_ids: Vec<String> = raters(6).into_iter().map(|r| r.id).collect();
        let plan = assign_rater_pairs(&ids, &rater_ids, &cal, 3).unwrap();
        let tasks = ids
            .iter()
            .map(|id| RatingTask {
                item_id: id.clone(),
                sql: format!("SELECT * FROM {id}"),
                candidates: BTreeMap::from([
                    ("baseline".to_string(), "Reads rows.".to_string()),
                    ("ours".to_string(), format!("Reads every row of {id}.")),
                ]),
            })
            .collect();
        open(dir, StoreInputs { rating_tasks: tasks, plan: Some(plan), blind_seed: 9, ..Default::default() }, clock)
    }

    #[test]
    fn rating_plan_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let clock = ManualClock::new(0);
        let mut s = rating_setup(dir.path(), &clock);
        let primary = s
            .items
            .iter()
            .find(|(_, i)| i.capacity == 2)
            .map(|(id, i)| (id.clone(), i.allowed.clone().unwrap()))
            .unwrap();
        let outsider = (0..6).map(|i| format!("r{i}")).find(|r| !primary.1.contains(r)).unwrap();
        let err =
            s.submit(&primary.0, &outsider, SubmissionBody::Rating { correctness: 3, completeness: 3, naturalness: 3 });
        assert!(matches!(err, Err(StoreError::Forbidden(_))));

        let insider = primary.1.iter().next().unwrap().clone();
        while let Some(it) = s.next_item(&insider, WorkKind::RateComment).unwrap() {
            let Payload::RateComment { alias, .. } = &it.payload else { panic!() };
            assert!(alias.starts_with('S'));
            if it.id == primary.0 {
                let bad = SubmissionBody::Rating { correctness: 5, completeness: 3, naturalness: 3 };
                assert!(matches!(s.submit(&it.id, &insider, bad), Err(StoreError::Validation(_))));
            }
            s.submit(&it.id, &insider, SubmissionBody::Rating { correctness: 3, completeness: 3, naturalness: 4 })
                .unwrap();
        }
        // 2 calibration items + 2 primary items per pair, two systems each
        assert_eq!(s.export_ratings().records.len(), 8);
        let models: BTreeSet<_> = s.export_ratings().records.iter().map(|r| r.model_id.clone()).collect();
        assert_eq!(models, BTreeSet::from(["baseline".to_string(), "ours".to_string()]));
    }

    #[test]
    fn payloads_never_name_models() {
        let dir = tempfile::tempdir().unwrap();
        let clock = ManualClock::new(0);
        let mut s = rating_setup(dir.path(), &clock);
        while let Some(it) = s.next_item("r0", WorkKind::RateComment).unwrap() {
            let json = serde_json::to_string(&it).unwrap();
            assert!(!json.contains("baseline") && !json.contains("\"ours\""), "{json}");
            s.submit(&it.id, "r0", SubmissionBody::Rating { correctness: 2, completeness: 2, naturalness: 2 }).unwrap();
        }
    }

    #[test]
    fn dpo_export_excludes_flagged_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let clock = ManualClock::new(0);
        let triples: Vec<PreferenceTriple> = (0..3)
            .map(|i| PreferenceTriple {
                id: format!("t{i}"),
                prompt: format!("# template: sft-v1\n```sql\nSELECT {i}\n```\n"),
                chosen: "good".into(),
                rejected: "bad".into(),
                strategy: sqlcomment_core::forge::Strategy::Incomplete,
                source_pair_id: format!("p{i}"),
            })
            .collect();
        let mut s = open(dir.path(), StoreInputs { triples, ..Default::default() }, &clock);
        let it = s.next_item("r0", WorkKind::ValidatePair).unwrap().unwrap();
        assert_eq!(
            it.payload,
            Payload::ValidatePair { sql: "SELECT 0".into(), chosen: "good".into(), rejected: "bad".into() }
        );
        s.submit("t0", "r0", SubmissionBody::FlagInvalid { reason: "rejected is fine".into() }).unwrap();
        s.next_item("r0", WorkKind::ValidatePair).unwrap();
        s.submit("t1", "r0", SubmissionBody::PairValid).unwrap();
        let e = s.export_dpo();
        assert_eq!(e.records.iter().map(|t| t.id.as_str()).collect::<Vec<_>>(), ["t1"]);
        assert_eq!(e.excluded.len(), 2);
        assert!(e.excluded[0].1.starts_with("flagged invalid"));
        let p = s.progress();
        assert_eq!((p[&WorkKind::ValidatePair].total, p[&WorkKind::ValidatePair].done), (3, 2));
    }
}
