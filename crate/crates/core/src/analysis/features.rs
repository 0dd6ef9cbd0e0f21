use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::lexer::{lex, Token, TokenKind};

/// Structural construct counts for one SQL text.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureVector {
    pub inner_joins: u32,
    pub left_joins: u32,
    pub right_joins: u32,
    pub full_joins: u32,
    pub cross_joins: u32,
    pub subqueries: u32,
    pub correlated_subqueries: u32,
    pub ctes: u32,
    pub aggregates: u32,
    pub window_functions: u32,
    pub group_by_clauses: u32,
    pub having_clauses: u32,
    pub order_by_clauses: u32,
    pub limit_clauses: u32,
    pub set_operations: u32,
    pub distinct_tables: u32,
    pub where_predicates: u32,
    /// Deepest subquery nesting; a flat query is 0.
    pub nesting_depth: u32,
}

impl FeatureVector {
    pub fn joins_total(&self) -> u32 {
        self.inner_joins + self.left_joins + self.right_joins + self.full_joins + self.cross_joins
    }

    /// Number of join kinds (inner, left, right, full, cross) used at least once.
    pub fn distinct_join_kinds(&self) -> usize {
        [self.inner_joins, self.left_joins, self.right_joins, self.full_joins, self.cross_joins]
            .iter()
            .filter(|&&c| c > 0)
            .count()
    }
}

const AGGREGATES: &[&str] = &[
    "count",
    "sum",
    "avg",
    "min",
    "max",
    "group_concat",
    "string_agg",
    "array_agg",
    "listagg",
    "stddev",
    "stddev_pop",
    "stddev_samp",
    "variance",
    "var_pop",
    "var_samp",
    "median",
    "bool_and",
    "bool_or",
    "every",
    "json_agg",
    "jsonb_agg",
    "json_arrayagg",
    "json_objectagg",
    "percentile_cont",
    "percentile_disc",
    "total",
];

/// Words that can never be a table alias.
const RESERVED: &[&str] = &[
    "where",
    "join",
    "inner",
    "left",
    "right",
    "full",
    "cross",
    "natural",
    "outer",
    "on",
    "using",
    "group",
    "order",
    "having",
    "limit",
    "union",
    "intersect",
    "except",
    "minus",
    "select",
    "from",
    "as",
    "and",
    "or",
    "not",
    "window",
    "offset",
    "fetch",
    "set",
    "values",
    "lateral",
    "into",
    "when",
    "then",
    "else",
    "end",
    "qualify",
    "returning",
    "straight_join",
    "tablesample",
    "with",
    "for",
    "partition",
    "by",
    "is",
    "in",
    "like",
    "between",
    "top",
    "pivot",
    "unpivot",
];

/// Words after which `(` opens a plain group rather than a function call.
const NON_CALL: &[&str] = &[
    "in",
    "exists",
    "values",
    "as",
    "on",
    "and",
    "or",
    "not",
    "from",
    "join",
    "where",
    "select",
    "when",
    "then",
    "else",
    "using",
    "any",
    "all",
    "some",
    "by",
    "is",
    "like",
    "between",
    "set",
    "into",
    "table",
    "having",
    "recursive",
    "return",
    "returns",
    "case",
    "distinct",
    "lateral",
];

#[derive(Debug)]
enum FrameKind {
    Query { cte: bool, derived: bool },
    Call(String),
    Over,
    Plain,
}

#[derive(Debug, Default)]
struct Scope {
    defs: HashSet<String>,
    refs: HashSet<String>,
    /// `frames.len()` at the scope's own top level.
    level: usize,
    in_where: bool,
    between_pending: bool,
    in_from_list: bool,
    in_cte_list: bool,
    expect_derived: bool,
}

struct Scanner<'a> {
    toks: &'a [Token],
    frames: Vec<FrameKind>,
    scopes: Vec<Scope>,
    tables: HashSet<String>,
    f: FeatureVector,
}

fn is_ident(t: &Token) -> bool {
    matches!(t.kind, TokenKind::Word | TokenKind::QuotedIdent)
}

/// Count structural constructs in `sql`. Total: any input, including
/// unbalanced parentheses and non-SQL text, yields a vector.
pub fn extract_features(sql: &str) -> FeatureVector {
    let toks = lex(sql);
    let mut sc = Scanner {
        toks: &toks,
        frames: Vec::new(),
        scopes: vec![Scope::default()],
        tables: HashSet::new(),
        f: FeatureVector::default(),
    };
    sc.run();
    sc.f.distinct_tables = sc.tables.len() as u32;
    sc.f
}

impl<'a> Scanner<'a> {
    fn tok(&self, i: usize) -> Option<&'a Token> {
        self.toks.get(i)
    }

    fn word_at(&self, i: usize, w: &str) -> bool {
        self.tok(i).is_some_and(|t| t.is_word(w))
    }

    fn scope(&mut self) -> &mut Scope {
        self.scopes.last_mut().expect("root scope is never popped")
    }

    fn at_scope_top(&self) -> bool {
        self.scopes.last().is_some_and(|s| s.level == self.frames.len())
    }

    fn query_depth(&self) -> u32 {
        self.frames.iter().filter(|f| matches!(f, FrameKind::Query { cte: false, .. })).count() as u32
    }

    fn end_where(&mut self) {
        let s = self.scope();
        s.in_where = false;
        s.between_pending = false;
        s.in_from_list = false;
    }

    fn run(&mut self) {
        let mut i = 0;
        while i < self.toks.len() {
            let t = &self.toks[i];
            i = match t.kind {
                TokenKind::Punct if t.text == "(" => {
                    self.open_paren(i);
                    i + 1
                }
                TokenKind::Punct if t.text == ")" => self.close_paren(i),
                TokenKind::Punct if t.text == "," => {
                    if self.at_scope_top() && self.scopes.last().is_some_and(|s| s.in_from_list) {
                        self.table_ref(i + 1)
                    } else {
                        i + 1
                    }
                }
                TokenKind::Punct if t.text == ";" => {
                    self.end_where();
                    i + 1
                }
                TokenKind::Word | TokenKind::QuotedIdent => self.word(i),
                _ => i + 1,
            };
        }
    }

    fn open_paren(&mut self, i: usize) {
        let next_is_query = self.word_at(i + 1, "select") || self.word_at(i + 1, "with");
        let prev = i.checked_sub(1).and_then(|j| self.tok(j));
        if next_is_query {
            let cte = self.scopes.last().is_some_and(|s| s.in_cte_list) && prev.is_some_and(|p| p.is_word("as"));
            let derived = std::mem::take(&mut self.scope().expect_derived);
            self.frames.push(FrameKind::Query { cte, derived });
            if !cte {
                self.f.subqueries += 1;
                self.f.nesting_depth = self.f.nesting_depth.max(self.query_depth());
            }
            let level = self.frames.len();
            self.scopes.push(Scope { level, ..Scope::default() });
        } else if prev.is_some_and(|p| p.is_word("over")) {
            self.frames.push(FrameKind::Over);
        } else if let Some(p) = prev.filter(|p| is_ident(p) && !NON_CALL.contains(&p.text.as_str())) {
            self.frames.push(FrameKind::Call(p.text.clone()));
        } else {
            self.frames.push(FrameKind::Plain);
        }
    }

    /// Returns the index to continue scanning from.
    fn close_paren(&mut self, i: usize) -> usize {
        let Some(frame) = self.frames.pop() else {
            return i + 1;
        };
        match frame {
            FrameKind::Query { cte, derived } => {
                if self.scopes.len() > 1 {
                    let inner = self.scopes.pop().expect("checked above");
                    if !cte && self.is_correlated(&inner) {
                        self.f.correlated_subqueries += 1;
                    }
                }
                if derived {
                    return self.alias(i + 1);
                }
            }
            FrameKind::Call(name) => {
                if self.word_at(i + 1, "over") {
                    self.f.window_functions += 1;
                } else if AGGREGATES.contains(&name.as_str()) {
                    self.f.aggregates += 1;
                }
            }
            FrameKind::Over | FrameKind::Plain => {}
        }
        i + 1
    }

    fn is_correlated(&self, inner: &Scope) -> bool {
        inner.refs.iter().filter(|r| !inner.defs.contains(*r)).any(|r| self.scopes.iter().any(|s| s.defs.contains(r)))
    }

    fn word(&mut self, i: usize) -> usize {
        let t = &self.toks[i];
        let top = self.at_scope_top();
        let innermost_is_fn = matches!(self.frames.last(), Some(FrameKind::Call(_) | FrameKind::Over));

        if t.kind == TokenKind::Word {
            match t.text.as_str() {
                "with" if top => self.scope().in_cte_list = true,
                "as" if top && self.scopes.last().is_some_and(|s| s.in_cte_list) => {
                    if self.tok(i + 1).is_some_and(|n| n.is_punct("(")) {
                        self.f.ctes += 1;
                    }
                }
                "select" if top => {
                    let s = self.scope();
                    s.in_cte_list = false;
                    s.in_from_list = false;
                }
                "from" if top => {
                    self.scope().in_from_list = true;
                    return self.table_ref(i + 1);
                }
                "join" if !innermost_is_fn => {
                    self.count_join(i);
                    return self.table_ref(i + 1);
                }
                "where" if top => {
                    let s = self.scope();
                    s.in_from_list = false;
                    s.in_where = true;
                    self.f.where_predicates += 1;
                }
                "and" | "or" if top && self.scopes.last().is_some_and(|s| s.in_where) => {
                    let s = self.scope();
                    if t.text == "and" && s.between_pending {
                        s.between_pending = false;
                    } else {
                        self.f.where_predicates += 1;
                    }
                }
                "between" if top => self.scope().between_pending = true,
                "group" if top && self.word_at(i + 1, "by") => {
                    self.f.group_by_clauses += 1;
                    self.end_where();
                }
                "order" if top && !innermost_is_fn && self.word_at(i + 1, "by") => {
                    self.f.order_by_clauses += 1;
                    self.end_where();
                }
                "having" if top => {
                    self.f.having_clauses += 1;
                    self.end_where();
                }
                "limit" if top => {
                    self.f.limit_clauses += 1;
                    self.end_where();
                }
                "top" => {
                    let prev = i.checked_sub(1).and_then(|j| self.tok(j));
                    if prev.is_some_and(|p| p.is_word("select") || p.is_word("distinct") || p.is_word("all")) {
                        self.f.limit_clauses += 1;
                    }
                }
                "fetch" if self.word_at(i + 1, "first") || self.word_at(i + 1, "next") => {
                    self.f.limit_clauses += 1;
                    self.end_where();
                }
                "union" | "intersect" | "except" | "minus" if top => {
                    self.f.set_operations += 1;
                    self.end_where();
                }
                "window" | "qualify" | "returning" if top => self.end_where(),
                _ => {}
            }
        }

        // qualifier.column
        if self.tok(i + 1).is_some_and(|n| n.is_punct("."))
            && self.tok(i + 2).is_some_and(|n| is_ident(n) || n.is_punct("*"))
        {
            let q = t.text.clone();
            self.scope().refs.insert(q);
        }
        i + 1
    }

    fn count_join(&mut self, i: usize) {
        let mut j = i;
        if j > 0 && self.word_at(j - 1, "outer") {
            j -= 1;
        }
        let kind = j.checked_sub(1).and_then(|k| self.tok(k)).map(|t| t.text.as_str());
        match kind {
            Some("left") => self.f.left_joins += 1,
            Some("right") => self.f.right_joins += 1,
            Some("full") => self.f.full_joins += 1,
            Some("cross") => self.f.cross_joins += 1,
            _ => self.f.inner_joins += 1,
        }
    }

    /// Parse one table reference starting at `i`: a dotted name plus an
    /// optional alias, or a derived table whose `(` is left for the main loop.
    fn table_ref(&mut self, i: usize) -> usize {
        let mut j = i;
        if self.word_at(j, "lateral") || self.word_at(j, "only") {
            j += 1;
        }
        match self.tok(j) {
            Some(t) if t.is_punct("(") => {
                self.scope().expect_derived = true;
                j
            }
            Some(t) if is_ident(t) && !(t.kind == TokenKind::Word && RESERVED.contains(&t.text.as_str())) => {
                let mut parts = vec![t.text.clone()];
                j += 1;
                while self.tok(j).is_some_and(|d| d.is_punct(".")) && self.tok(j + 1).is_some_and(is_ident) {
                    parts.push(self.toks[j + 1].text.clone());
                    j += 2;
                }
                let full = parts.join(".");
                let last = parts.last().cloned().unwrap_or_default();
                self.tables.insert(full.clone());
                let s = self.scope();
                s.defs.insert(full);
                s.defs.insert(last);
                if self.tok(j).is_some_and(|n| n.is_punct("(")) {
                    // table-valued function; the call frame is opened by the main loop
                    return j;
                }
                self.alias(j)
            }
            _ => i,
        }
    }

    fn alias(&mut self, i: usize) -> usize {
        let mut j = i;
        if self.word_at(j, "as") {
            j += 1;
        }
        match self.tok(j) {
            Some(t) if is_ident(t) && !(t.kind == TokenKind::Word && RESERVED.contains(&t.text.as_str())) => {
                let a = t.text.clone();
                self.scope().defs.insert(a);
                j + 1
            }
            _ => i,
        }
    }
}
