use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CommentPair, ForgeError};

pub const SFT_TEMPLATE_VERSION: &str = "sft-v1";
pub const NEGATIVE_TEMPLATE_VERSION: &str = "neg-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Superficial,
    Incomplete,
    TechnicalErrors,
    OverlyVerbose,
    VagueAndUnclear,
    WrongEmphasis,
    PoorStructure,
    MisunderstandPurpose,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Self::Superficial,
        Self::Incomplete,
        Self::TechnicalErrors,
        Self::OverlyVerbose,
        Self::VagueAndUnclear,
        Self::WrongEmphasis,
        Self::PoorStructure,
        Self::MisunderstandPurpose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Superficial => "superficial",
            Self::Incomplete => "incomplete",
            Self::TechnicalErrors => "technical_errors",
            Self::OverlyVerbose => "overly_verbose",
            Self::VagueAndUnclear => "vague_and_unclear",
            Self::WrongEmphasis => "wrong_emphasis",
            Self::PoorStructure => "poor_structure",
            Self::MisunderstandPurpose => "misunderstand_purpose",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }

    /// Instruction paragraph from the `neg-v1` strategy table.
    pub fn instruction(self) -> &'static str {
        match self {
            Self::Superficial => {
                "Generate a SUPERFICIAL explanation that only restates the SQL keywords in plain words. \
                 Do not say what the query computes or why any clause is there."
            }
            Self::Incomplete => {
                "Generate an INCOMPLETE explanation that feels rushed. Describe the first part of the query \
                 and leave out at least one filter, join, grouping or ordering step."
            }
            Self::TechnicalErrors => {
                "Generate an explanation with TECHNICAL ERRORS. Misdescribe one or two operations, for \
                 example the join type, the aggregate function or the direction of a comparison, while \
                 keeping a confident tone."
            }
            Self::OverlyVerbose => {
                "Generate an OVERLY VERBOSE explanation. Repeat points, add general SQL background that \
                 does not help with this query, and bury the actual logic in filler."
            }
            Self::VagueAndUnclear => {
                "Generate a VAGUE AND UNCLEAR explanation. Use imprecise wording such as \"some data\" or \
                 \"certain conditions\" instead of naming tables, columns and values."
            }
            Self::WrongEmphasis => {
                "Generate an explanation with the WRONG EMPHASIS. Spend most of it on trivial details such \
                 as aliases or formatting and mention the core logic only in passing."
            }
            Self::PoorStructure => {
                "Generate a POORLY STRUCTURED explanation. Describe the steps out of execution order, mix \
                 unrelated points in the same sentence and skip any step-by-step layout."
            }
            Self::MisunderstandPurpose => {
                "Generate an explanation that MISUNDERSTANDS THE PURPOSE of the query. Describe the clauses \
                 plausibly but draw a wrong conclusion about what question the query answers."
            }
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Uniform draw over the eight strategies.
pub fn pick_strategy<R: Rng + ?Sized>(rng: &mut R) -> Strategy {
    Strategy::ALL[rng.random_range(0..Strategy::ALL.len())]
}

const SFT_INSTRUCTION: &str = "You are a database expert writing comments for SQL queries. \
Each comment explains what the query does, step by step, so that a developer who did not write it \
can follow the logic.";

const SFT_DIRECTIVE: &str = "Write a technical, step-by-step explanation of the target query. \
Cover every table, join, filter, grouping, ordering and limit it uses.";

const NEGATIVE_FRAMING: &str = "You are helping build a preference dataset for SQL explanations. \
Below is a SQL query and a high-quality explanation of it. Your task is to write a worse explanation \
of the same query, following the flaw described under \"Strategy\".";

const NEGATIVE_DIRECTIVE: &str = "Generate ONLY the poor explanation. Do not add a preamble, do not \
mention the strategy and do not point out the flaws.";

fn sql_block(out: &mut String, sql: &str) {
    out.push_str("```sql\n");
    out.push_str(sql.trim_end());
    out.push_str("\n```\n");
}

/// Target fields for an SFT prompt.
#[derive(Debug, Clone, Copy, Default)]
pub struct PromptTarget<'a> {
    pub sql: &'a str,
    pub question: Option<&'a str>,
    pub schema_text: Option<&'a str>,
    pub evidence: Option<&'a str>,
}

impl<'a> From<&'a CommentPair> for PromptTarget<'a> {
    fn from(p: &'a CommentPair) -> Self {
        Self {
            sql: &p.sql,
            question: p.question.as_deref(),
            schema_text: p.schema_text.as_deref(),
            evidence: p.evidence.as_deref(),
        }
    }
}

impl<'a> From<&'a crate::corpus::SqlRecord> for PromptTarget<'a> {
    fn from(r: &'a crate::corpus::SqlRecord) -> Self {
        Self {
            sql: &r.text,
            question: r.question.as_deref(),
            schema_text: r.schema_text.as_deref(),
            evidence: r.evidence.as_deref(),
        }
    }
}

fn nonempty(s: Option<&str>) -> Option<&str> {
    s.filter(|s| !s.trim().is_empty())
}

/// The SQL of the last fenced block, which in an SFT prompt is the target.
pub fn prompt_sql(prompt: &str) -> Option<&str> {
    let start = prompt.rfind("```sql\n")? + "```sql\n".len();
    let len = prompt[start..].find("\n```")?;
    Some(&prompt[start..start + len])
}

pub fn build_sft_prompt(target: PromptTarget<'_>, few_shot: &[CommentPair]) -> Result<String, ForgeError> {
    if target.sql.trim().is_empty() {
        return Err(ForgeError::MissingSql);
    }
    let mut out = format!("# template: {SFT_TEMPLATE_VERSION}\n{SFT_INSTRUCTION}\n\n");
    for (i, ex) in few_shot.iter().enumerate() {
        out.push_str(&format!("### Example {}\n", i + 1));
        sql_block(&mut out, &ex.sql);
        out.push_str("Explanation:\n");
        out.push_str(ex.comment.trim_end());
        out.push_str("\n\n");
    }
    out.push_str("### Target\n");
    sql_block(&mut out, target.sql);
    if let Some(q) = nonempty(target.question) {
        out.push_str(&format!("Question: {}\n", q.trim()));
    }
    if let Some(s) = nonempty(target.schema_text) {
        out.push_str(&format!("Schema:\n{}\n", s.trim_end()));
    }
    if let Some(e) = nonempty(target.evidence) {
        out.push_str(&format!("Evidence: {}\n", e.trim()));
    }
    out.push('\n');
    out.push_str(SFT_DIRECTIVE);
    out.push('\n');
    Ok(out)
}

pub fn build_negative_prompt(pair: &CommentPair, strategy: Strategy) -> Result<String, ForgeError> {
    if pair.comment.trim().is_empty() {
        return Err(ForgeError::MissingComment(pair.id.clone()));
    }
    if pair.sql.trim().is_empty() {
        return Err(ForgeError::MissingSql);
    }
    let mut out = format!("# template: {NEGATIVE_TEMPLATE_VERSION}\n{NEGATIVE_FRAMING}\n\n");
    out.push_str("SQL query:\n");
    sql_block(&mut out, &pair.sql);
    out.push_str("\nHigh-quality explanation:\n");
    out.push_str(pair.comment.trim_end());
    out.push_str("\n\nStrategy:\n");
    out.push_str(strategy.instruction());
    out.push_str("\n\n");
    out.push_str(NEGATIVE_DIRECTIVE);
    out.push('\n');
    Ok(out)
}
