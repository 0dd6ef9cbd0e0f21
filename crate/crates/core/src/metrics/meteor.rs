use std::collections::HashMap;
use std::path::Path;

use super::porter::stem;
use super::MetricError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeteorStage {
    Exact,
    Stem,
    Synonym,
}

/// Word -> synonym-set ids. Two words match when they share a set.
#[derive(Debug, Clone, Default)]
pub struct SynonymTable {
    groups: HashMap<String, Vec<usize>>,
}

impl SynonymTable {
    /// One synonym set per line, words separated by commas or whitespace.
    /// Lines starting with `#` are comments.
    pub fn parse(text: &str) -> Result<Self, MetricError> {
        let mut groups: HashMap<String, Vec<usize>> = HashMap::new();
        let mut gid = 0;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let words: Vec<_> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|w| !w.is_empty()).collect();
            if words.len() < 2 {
                return Err(MetricError::Synonyms {
                    line: i + 1,
                    msg: "a synonym set needs at least two words".into(),
                });
            }
            for w in words {
                groups.entry(w.to_lowercase()).or_default().push(gid);
            }
            gid += 1;
        }
        Ok(Self { groups })
    }

    pub fn load(path: &Path) -> Result<Self, MetricError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| MetricError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    fn related(&self, a: &str, b: &str) -> bool {
        match (self.groups.get(a), self.groups.get(b)) {
            (Some(x), Some(y)) => x.iter().any(|g| y.contains(g)),
            _ => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MeteorConfig {
    /// Applied in order; each stage only sees tokens left unaligned by earlier ones.
    pub stages: Vec<MeteorStage>,
    pub synonyms: SynonymTable,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Alignment search width.
    pub beam_width: usize,
}

impl Default for MeteorConfig {
    fn default() -> Self {
        Self {
            stages: vec![MeteorStage::Exact, MeteorStage::Stem],
            synonyms: SynonymTable::default(),
            alpha: 0.9,
            beta: 3.0,
            gamma: 0.5,
            beam_width: 64,
        }
    }
}

impl MeteorConfig {
    pub fn exact_only() -> Self {
        Self { stages: vec![MeteorStage::Exact], ..Self::default() }
    }
}

#[derive(Clone)]
struct Partial {
    c_to_r: Vec<Option<usize>>,
    r_used: Vec<bool>,
    matches: usize,
    chunks: usize,
    last: Option<(usize, usize)>,
}

impl Partial {
    fn push(&mut self, i: usize, j: usize) {
        match self.last {
            Some((pi, pj)) if pi + 1 == i && pj + 1 == j => {}
            _ => self.chunks += 1,
        }
        self.last = Some((i, j));
    }
}

/// Staged unigram alignment. Each stage only considers tokens left unaligned
/// by earlier stages and runs a left-to-right beam search ranked by most
/// matches, then fewest chunks. Returns (candidate, reference) pairs sorted by
/// candidate index.
fn align(cand: &[String], reference: &[String], cfg: &MeteorConfig) -> Vec<(usize, usize)> {
    let needs_stems = cfg.stages.contains(&MeteorStage::Stem);
    let stems = |v: &[String]| -> Vec<String> {
        if needs_stems {
            v.iter().map(|t| stem(t)).collect()
        } else {
            Vec::new()
        }
    };
    let (cand_stems, ref_stems) = (stems(cand), stems(reference));

    let mut c_to_r: Vec<Option<usize>> = vec![None; cand.len()];
    let mut r_used = vec![false; reference.len()];
    for stage in &cfg.stages {
        let matches = |i: usize, j: usize| match stage {
            MeteorStage::Exact => cand[i] == reference[j],
            MeteorStage::Stem => cand_stems[i] == ref_stems[j],
            MeteorStage::Synonym => cfg.synonyms.related(&cand[i], &reference[j]),
        };
        let mut beam =
            vec![Partial { c_to_r: c_to_r.clone(), r_used: r_used.clone(), matches: 0, chunks: 0, last: None }];
        for (i, fixed) in c_to_r.iter().enumerate() {
            if let Some(j) = *fixed {
                // fixed by an earlier stage
                for p in &mut beam {
                    p.push(i, j);
                }
                continue;
            }
            let any = (0..reference.len()).any(|j| !r_used[j] && matches(i, j));
            if !any {
                continue;
            }
            let mut next = Vec::with_capacity(beam.len() * 2);
            for p in &beam {
                for j in (0..reference.len()).filter(|&j| !p.r_used[j] && matches(i, j)) {
                    let mut q = p.clone();
                    q.c_to_r[i] = Some(j);
                    q.r_used[j] = true;
                    q.matches += 1;
                    q.push(i, j);
                    next.push(q);
                }
                next.push(p.clone());
            }
            // stable: ties keep generation order, so results are deterministic
            next.sort_by(|a, b| b.matches.cmp(&a.matches).then(a.chunks.cmp(&b.chunks)));
            next.truncate(cfg.beam_width.max(1));
            beam = next;
        }
        let best = beam.swap_remove(0);
        c_to_r = best.c_to_r;
        r_used = best.r_used;
    }
    c_to_r.iter().enumerate().filter_map(|(i, r)| r.map(|j| (i, j))).collect()
}

fn count_chunks(alignment: &[(usize, usize)]) -> usize {
    if alignment.is_empty() {
        return 0;
    }
    1 + alignment.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count()
}

/// Sentence METEOR on the 0–100 scale.
pub fn meteor(candidate: &[String], reference: &[String], cfg: &MeteorConfig) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let alignment = align(candidate, reference, cfg);
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = p * r / (cfg.alpha * p + (1.0 - cfg.alpha) * r);
    let chunks = count_chunks(&alignment);
    let penalty = cfg.gamma * (chunks as f64 / m as f64).powf(cfg.beta);
    100.0 * f_mean * (1.0 - penalty)
}
