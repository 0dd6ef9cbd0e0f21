use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::prompts::{prompt_sql, Strategy, NEGATIVE_TEMPLATE_VERSION, SFT_TEMPLATE_VERSION};
use crate::analysis::lexer::{lex, Token, TokenKind};
use crate::hashing::sha256_hex;

#[derive(Debug, thiserror::Error)]
pub enum GenerationError {
    #[error("environment variable {0} holding the API key is not set")]
    MissingKey(String),
    #[error("endpoint rejected the request with status {status}: {body}")]
    Config { status: u16, body: String },
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },
    #[error("endpoint returned an unreadable response: {0}")]
    Protocol(String),
    #[error("endpoint returned an empty completion")]
    Empty,
    #[error("audit log {path}: {source}")]
    Audit { path: String, source: std::io::Error },
}

pub trait Generator {
    fn generate(&mut self, prompt: &str, temperature: f64) -> Result<String, GenerationError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationClientConfig {
    /// Full chat-completions URL, e.g. `https://host/v1/chat/completions`.
    pub endpoint_url: String,
    pub model_name: String,
    /// Name of the variable holding the key. Empty means send no key.
    pub api_key_env_var_name: String,
    pub temperature: f64,
    pub max_retries: usize,
    pub timeout_secs: f64,
    /// Requests per second; 0 disables limiting.
    pub request_rate_limit: f64,
    /// First retry delay; doubles on each further retry.
    pub backoff_base_ms: u64,
    pub audit_log: Option<PathBuf>,
}

impl Default for GenerationClientConfig {
    fn default() -> Self {
        Self {
            endpoint_url: String::new(),
            model_name: String::new(),
            api_key_env_var_name: "SQLCOMMENT_API_KEY".into(),
            temperature: 0.0,
            max_retries: 3,
            timeout_secs: 60.0,
            request_rate_limit: 1.0,
            backoff_base_ms: 500,
            audit_log: None,
        }
    }
}

/// Spaces calls at least `1 / rate` seconds apart.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next: Option<Instant>,
}

impl RateLimiter {
    pub fn new(rate_per_sec: f64) -> Self {
        let interval = if rate_per_sec > 0.0 { Duration::from_secs_f64(1.0 / rate_per_sec) } else { Duration::ZERO };
        Self { interval, next: None }
    }

    pub fn acquire(&mut self) {
        let now = Instant::now();
        let at = match self.next {
            Some(t) if t > now => {
                thread::sleep(t - now);
                t
            }
            _ => now,
        };
        self.next = Some(at + self.interval);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub unix_ms: u64,
    pub attempt: usize,
    pub prompt_sha256: String,
    /// HTTP status, absent on transport failure.
    pub status: Option<u16>,
    /// `ok`, `retry` or `error`.
    pub outcome: String,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
}

pub struct HttpGenerator {
    cfg: GenerationClientConfig,
    agent: ureq::Agent,
    key: Option<String>,
    limiter: RateLimiter,
    audit_file: Option<File>,
    audit: Vec<AuditRecord>,
}

impl HttpGenerator {
    pub fn new(cfg: GenerationClientConfig) -> Result<Self, GenerationError> {
        let key = if cfg.api_key_env_var_name.is_empty() {
            None
        } else {
            Some(
                std::env::var(&cfg.api_key_env_var_name)
                    .map_err(|_| GenerationError::MissingKey(cfg.api_key_env_var_name.clone()))?,
            )
        };
        let agent_cfg = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs.max(0.001))))
            .build();
        let audit_file = match &cfg.audit_log {
            Some(p) => Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|source| GenerationError::Audit { path: p.display().to_string(), source })?,
            ),
            None => None,
        };
        Ok(Self {
            limiter: RateLimiter::new(cfg.request_rate_limit),
            agent: ureq::Agent::new_with_config(agent_cfg),
            key,
            cfg,
            audit_file,
            audit: Vec::new(),
        })
    }

    /// Every attempt made so far, in order.
    pub fn audit(&self) -> &[AuditRecord] {
        &self.audit
    }

    fn log(&mut self, rec: AuditRecord) -> Result<(), GenerationError> {
        if let Some(f) = &mut self.audit_file {
            let line = serde_json::to_string(&rec).expect("audit record serializes");
            writeln!(f, "{line}").map_err(|source| GenerationError::Audit {
                path: self.cfg.audit_log.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                source,
            })?;
        }
        log::debug!("generation attempt {} {}: {}", rec.attempt, rec.outcome, rec.detail);
        self.audit.push(rec);
        Ok(())
    }

    fn call(&mut self, body: &str) -> Result<(u16, String), String> {
        self.limiter.acquire();
        let mut req = self.agent.post(&self.cfg.endpoint_url).header("Content-Type", "application/json");
        if let Some(k) = &self.key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok((status, text))
    }
}

fn unix_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn completion_text(body: &str) -> Result<String, GenerationError> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| GenerationError::Protocol(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| GenerationError::Protocol("missing choices[0].message.content".into()))
}

impl Generator for HttpGenerator {
    fn generate(&mut self, prompt: &str, temperature: f64) -> Result<String, GenerationError> {
        let body = serde_json::json!({
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
        })
        .to_string();
        let prompt_sha256 = sha256_hex(prompt.as_bytes());
        let attempts = self.cfg.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.cfg.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16));
                thread::sleep(Duration::from_millis(delay));
            }
            let retry_left = attempt + 1 < attempts;
            let record = |status, outcome: &str, detail: String, response| AuditRecord {
                unix_ms: unix_ms(),
                attempt,
                prompt_sha256: prompt_sha256.clone(),
                status,
                outcome: outcome.to_string(),
                detail,
                response,
            };
            match self.call(&body) {
                Err(msg) => {
                    self.log(record(None, if retry_left { "retry" } else { "error" }, msg.clone(), None))?;
                    last = msg;
                }
                Ok((status, text)) if status == 429 || status >= 500 => {
                    let msg = format!("status {status}");
                    self.log(record(
                        Some(status),
                        if retry_left { "retry" } else { "error" },
                        msg.clone(),
                        Some(text),
                    ))?;
                    last = msg;
                }
                Ok((status, text)) if !(200..300).contains(&status) => {
                    self.log(record(Some(status), "error", "client error".into(), Some(text.clone())))?;
                    return Err(GenerationError::Config { status, body: text });
                }
                Ok((status, text)) => {
                    let parsed = completion_text(&text);
                    let (outcome, detail) = match &parsed {
                        Ok(c) if c.trim().is_empty() => ("error", "empty completion".to_string()),
                        Ok(_) => ("ok", String::new()),
                        Err(e) => ("error", e.to_string()),
                    };
                    self.log(record(Some(status), outcome, detail, Some(text)))?;
                    let content = parsed?;
                    if content.trim().is_empty() {
                        return Err(GenerationError::Empty);
                    }
                    return Ok(content);
                }
            }
        }
        Err(GenerationError::Transport { attempts, message: last })
    }
}

type ReplyFn = Box<dyn FnMut(&str) -> String + Send>;

/// Offline generator. [`StubGenerator::degrading`] writes a template comment
/// for SFT prompts and a flawed rewrite of the chosen comment for negative
/// prompts, both as pure functions of the prompt.
pub struct StubGenerator {
    reply: ReplyFn,
    calls: usize,
}

impl StubGenerator {
    pub fn new(reply: impl FnMut(&str) -> String + Send + 'static) -> Self {
        Self { reply: Box::new(reply), calls: 0 }
    }

    pub fn degrading() -> Self {
        Self::new(stub_reply)
    }

    pub fn calls(&self) -> usize {
        self.calls
    }
}

impl Generator for StubGenerator {
    fn generate(&mut self, prompt: &str, _temperature: f64) -> Result<String, GenerationError> {
        self.calls += 1;
        let out = (self.reply)(prompt);
        if out.trim().is_empty() {
            return Err(GenerationError::Empty);
        }
        Ok(out)
    }
}

fn section<'a>(prompt: &'a str, header: &str, end: &str) -> Option<&'a str> {
    let start = prompt.find(header)? + header.len();
    let len = prompt[start..].find(end)?;
    Some(prompt[start..start + len].trim())
}

fn stub_reply(prompt: &str) -> String {
    let header = prompt.lines().next().unwrap_or_default();
    if header.ends_with(NEGATIVE_TEMPLATE_VERSION) {
        let chosen = section(prompt, "High-quality explanation:\n", "\n\nStrategy:").unwrap_or_default();
        let strategy = Strategy::ALL.into_iter().find(|s| prompt.contains(s.instruction()));
        return degrade(chosen, strategy.unwrap_or(Strategy::Superficial));
    }
    if header.ends_with(SFT_TEMPLATE_VERSION) {
        if let Some(sql) = prompt_sql(prompt) {
            return describe_sql(sql);
        }
    }
    "This query returns some data.".into()
}

fn degrade(chosen: &str, strategy: Strategy) -> String {
    let words: Vec<&str> = chosen.split_whitespace().collect();
    let half = words[..words.len().div_ceil(2)].join(" ");
    match strategy {
        Strategy::Superficial => "It is a SELECT statement that selects columns from a table.".into(),
        Strategy::Incomplete => format!("{half} ..."),
        Strategy::TechnicalErrors => {
            let swapped = chosen.replace("inner join", "left join").replace("count", "sum").replace("greater", "less");
            format!("{swapped} It also removes duplicate rows.")
        }
        Strategy::OverlyVerbose => {
            format!("SQL is a language for relational databases, and queries read data. {chosen} To repeat: {chosen}")
        }
        Strategy::VagueAndUnclear => "The query gets some data from certain tables under certain conditions.".into(),
        Strategy::WrongEmphasis => format!("The query uses short aliases and upper-case keywords. {half}"),
        Strategy::PoorStructure => {
            let mut w = words.clone();
            w.reverse();
            w.join(" ")
        }
        Strategy::MisunderstandPurpose => format!("{half} The point of the query is to update the stored values."),
    }
}

fn clause_text(tokens: &[Token]) -> String {
    let mut out = String::new();
    for t in tokens.iter().take(12) {
        if !out.is_empty() && !matches!(t.text.as_str(), "," | ")" | ".") && !out.ends_with(['(', '.']) {
            out.push(' ');
        }
        if t.kind == TokenKind::Str {
            out.push_str(&format!("'{}'", t.text));
        } else {
            out.push_str(&t.text);
        }
    }
    if tokens.len() > 12 {
        out.push_str(" ...");
    }
    out
}

/// Plain template description of the outermost query. Good enough for a
/// reproducible toy reference, not a substitute for a real model.
pub(crate) fn describe_sql(sql: &str) -> String {
    let toks = lex(sql);
    let word = |t: &Token, w: &str| t.is_word(w);
    let mut depth = 0i32;
    // (clause keyword, start index) at depth 0
    let mut marks: Vec<(&str, usize)> = Vec::new();
    for (i, t) in toks.iter().enumerate() {
        if t.is_punct("(") {
            depth += 1;
        } else if t.is_punct(")") {
            depth -= 1;
        } else if depth == 0 {
            for kw in ["select", "from", "where", "group", "having", "order", "limit"] {
                if word(t, kw) {
                    marks.push((kw, i));
                }
            }
        }
    }
    let span = |kw: &str| -> Option<&[Token]> {
        let pos = marks.iter().position(|(k, _)| *k == kw)?;
        let mut start = marks[pos].1 + 1;
        if matches!(kw, "group" | "order") && toks.get(start).is_some_and(|t| word(t, "by")) {
            start += 1;
        }
        let end = marks.get(pos + 1).map_or(toks.len(), |m| m.1);
        Some(&toks[start..end.max(start)])
    };
    let mut parts = Vec::new();
    let cols = span("select").map(clause_text).unwrap_or_default();
    // first name of the FROM list plus whatever follows a comma or JOIN
    let mut tables: Vec<String> = Vec::new();
    if let Some(ts) = span("from") {
        let mut expect = true;
        for t in ts {
            if expect && t.kind == TokenKind::Word && !word(t, "lateral") {
                tables.push(t.text.clone());
                expect = false;
            } else if word(t, "join") || t.is_punct(",") {
                expect = true;
            } else if t.is_punct("(") {
                expect = false;
            }
        }
    }
    if tables.is_empty() {
        parts.push(format!("The query computes {cols}"));
    } else {
        parts.push(format!("The query selects {cols} from {}", tables.join(" and ")));
    }
    if let Some(w) = span("where") {
        parts.push(format!("keeping rows where {}", clause_text(w)));
    }
    if let Some(g) = span("group") {
        parts.push(format!("grouped by {}", clause_text(g)));
    }
    if let Some(h) = span("having") {
        parts.push(format!("keeping groups where {}", clause_text(h)));
    }
    if let Some(o) = span("order") {
        parts.push(format!("ordered by {}", clause_text(o)));
    }
    if let Some(l) = span("limit") {
        parts.push(format!("returning at most {} rows", clause_text(l)));
    }
    let mut s = parts.join(", ");
    s.push('.');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::{build_negative_prompt, build_sft_prompt, CommentPair, PromptTarget, ReviewStatus};

    #[test]
    fn describe_simple_queries() {
        assert_eq!(
            describe_sql("SELECT name, age FROM singer WHERE age > 30 ORDER BY age DESC LIMIT 3"),
            "The query selects name, age from singer, keeping rows where age > 30, ordered by age desc, returning at most 3 rows."
        );
        let d = describe_sql("select count(*) from a join b on a.id = b.id group by a.x");
        assert!(d.contains("from a and b") && d.contains("grouped by a.x"), "{d}");
    }

    #[test]
    fn stub_handles_both_prompt_kinds() {
        let mut g = StubGenerator::degrading();
        let p = build_sft_prompt(PromptTarget { sql: "SELECT x FROM t", ..Default::default() }, &[]).unwrap();
        assert_eq!(g.generate(&p, 0.0).unwrap(), "The query selects x from t.");
        let pair =
            CommentPair::new("SELECT x FROM t", "Reads column x of every row in t.", ReviewStatus::ExpertApproved);
        for s in Strategy::ALL {
            let neg = g.generate(&build_negative_prompt(&pair, s).unwrap(), 0.7).unwrap();
            assert_ne!(neg, pair.comment, "{s}");
        }
        assert_eq!(g.calls(), 9);
    }

    #[test]
    fn missing_key_is_reported() {
        let cfg = GenerationClientConfig {
            api_key_env_var_name: "SQLCOMMENT_TEST_SURELY_UNSET".into(),
            ..Default::default()
        };
        assert!(matches!(HttpGenerator::new(cfg), Err(GenerationError::MissingKey(_))));
    }

    #[test]
    fn limiter_spacing() {
        let mut l = RateLimiter::new(50.0);
        let t = Instant::now();
        for _ in 0..6 {
            l.acquire();
        }
        assert!(t.elapsed() >= Duration::from_millis(100));
    }
}
