use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sqlcomment_core::analysis::DifficultyWeights;
use sqlcomment_core::corpus::LshConfig;
use sqlcomment_core::forge::GenerationClientConfig;
use sqlcomment_core::hashing::sha256_hex;
use sqlcomment_core::policy::{Objective, TrainConfig};
use sqlcomment_core::review::KappaMode;

/// The whole pipeline in one file. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub dedup: DedupSection,
    #[serde(default)]
    pub analyze: DifficultyWeights,
    #[serde(default)]
    pub generation: GenerationSection,
    #[serde(default)]
    pub review: ReviewSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub decode: DecodeSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub report: ReportSection,
    #[serde(default)]
    pub serve: ServeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Raw records, one JSON object per line.
    pub corpus: PathBuf,
    /// Stage outputs and manifests go here.
    pub out_dir: PathBuf,
    /// Exemplar pairs for few-shot prompts.
    #[serde(default)]
    pub few_shot: Option<PathBuf>,
    /// Annotation export (or SFT file) used when `review.mode = "import"`.
    #[serde(default)]
    pub review_import: Option<PathBuf>,
    /// Ratings log consumed by the report stage.
    #[serde(default)]
    pub ratings: Option<PathBuf>,
    /// Rater assignment plan (calibration items, pairs).
    #[serde(default)]
    pub plan: Option<PathBuf>,
    /// Synonym table for METEOR.
    #[serde(default)]
    pub synonyms: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupMode {
    Exact,
    Fast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DedupSection {
    pub query_threshold: f64,
    /// Applied to the natural-language documents of the CPT corpus.
    pub text_threshold: f64,
    pub mode: DedupMode,
    pub num_perm: usize,
    pub bands: usize,
    pub rows: usize,
}

impl Default for DedupSection {
    fn default() -> Self {
        let l = LshConfig::default();
        Self {
            query_threshold: 0.9,
            text_threshold: 0.8,
            mode: DedupMode::Fast,
            num_perm: l.num_perm,
            bands: l.bands,
            rows: l.rows,
        }
    }
}

impl DedupSection {
    pub fn lsh(&self, seed: u64) -> LshConfig {
        LshConfig { num_perm: self.num_perm, bands: self.bands, rows: self.rows, seed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Offline template generator; reproducible.
    Stub,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSection {
    pub backend: Backend,
    pub draft_temperature: f64,
    pub rejected_temperature: f64,
    pub retry_budget: usize,
    #[serde(flatten)]
    pub client: GenerationClientConfig,
}

impl Default for GenerationSection {
    fn default() -> Self {
        Self {
            backend: Backend::Stub,
            draft_temperature: 0.0,
            rejected_temperature: 0.7,
            retry_budget: 3,
            client: GenerationClientConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewMode {
    /// Mark every draft approved. For toy runs only.
    AutoApprove,
    Import,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReviewSection {
    pub mode: ReviewMode,
    /// Share of reviewed pairs set aside as the DPO source pool.
    pub dpo_share: f64,
    /// Share of reviewed pairs held out for decoding and evaluation.
    pub heldout_share: f64,
}

impl Default for ReviewSection {
    fn default() -> Self {
        Self { mode: ReviewMode::Import, dpo_share: 0.2, heldout_share: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub grad_accum_steps: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    /// `desk` or `paper-4.5`.
    pub preset: String,
    /// Context length of the tabular policy.
    pub order: usize,
    /// Above this the context table is hashed.
    pub max_params: usize,
    pub vocab_min_count: usize,
    pub vocab_max_size: usize,
    pub cpt: Overrides,
    pub sft: Overrides,
    pub dpo: Overrides,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            order: 2,
            max_params: 4_000_000,
            vocab_min_count: 1,
            vocab_max_size: 8_000,
            cpt: Overrides::default(),
            sft: Overrides::default(),
            dpo: Overrides::default(),
        }
    }
}

impl TrainingSection {
    pub fn train_config(&self, objective: Objective, seed: u64) -> Result<TrainConfig> {
        let Some(mut c) = TrainConfig::preset(&self.preset, objective) else {
            bail!("unknown training preset {:?} (expected \"desk\" or \"paper-4.5\")", self.preset);
        };
        let o = match objective {
            Objective::Cpt => &self.cpt,
            Objective::Sft => &self.sft,
            Objective::Dpo => &self.dpo,
        };
        if let Some(v) = o.epochs {
            c.epochs = v;
        }
        if let Some(v) = o.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = o.grad_accum_steps {
            c.grad_accum_steps = v;
        }
        if let Some(v) = o.lr {
            c.optimizer.lr = v;
        }
        if let Some(v) = o.weight_decay {
            c.optimizer.weight_decay = v;
        }
        if let Some(v) = o.beta {
            c.beta = v;
        }
        c.seed = seed;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub max_len: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self { max_len: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// Add-one smoothing of BLEU precisions for n >= 2.
    pub smoothing: bool,
    /// METEOR matcher stages in order: exact, stem, synonym.
    pub meteor_stages: Vec<String>,
    pub per_sample: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { smoothing: true, meteor_stages: vec!["exact".into(), "stem".into()], per_sample: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub kappa_mode: KappaMode,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { kappa_mode: KappaMode::Pooled }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaterEntry {
    pub id: String,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub port: u16,
    pub lease_minutes: u64,
    /// Submission logs; relative to the run directory.
    pub data_dir: PathBuf,
    pub blind_seed: Option<u64>,
    pub raters: Vec<RaterEntry>,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self { port: 8080, lease_minutes: 30, data_dir: "annotation".into(), blind_seed: None, raters: Vec::new() }
    }
}

pub struct LoadedConfig {
    pub config: PipelineConfig,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let config: PipelineConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let loaded = Self { config, base_dir };
        loaded.validate()?;
        Ok(loaded)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.out_dir)
    }

    fn validate(&self) -> Result<()> {
        let c = &self.config;
        let corpus = self.resolve(&c.paths.corpus);
        if !corpus.is_file() {
            bail!("paths.corpus: {} does not exist", corpus.display());
        }
        for (name, p) in [
            ("paths.few_shot", &c.paths.few_shot),
            ("paths.review_import", &c.paths.review_import),
            ("paths.ratings", &c.paths.ratings),
            ("paths.plan", &c.paths.plan),
            ("paths.synonyms", &c.paths.synonyms),
        ] {
            if let Some(p) = p {
                // review imports and ratings may be produced later by the annotation service
                let later = matches!(name, "paths.review_import" | "paths.ratings" | "paths.plan");
                if !later && !self.resolve(p).is_file() {
                    bail!("{name}: {} does not exist", self.resolve(p).display());
                }
            }
        }
        for (name, t) in
            [("dedup.query_threshold", c.dedup.query_threshold), ("dedup.text_threshold", c.dedup.text_threshold)]
        {
            if !(t > 0.0 && t <= 1.0) {
                bail!("{name} must lie in (0, 1], got {t}");
            }
        }
        c.dedup.lsh(c.seed).validate()?;
        let (d, h) = (c.review.dpo_share, c.review.heldout_share);
        if !(0.0..1.0).contains(&d) || !(0.0..1.0).contains(&h) || d + h >= 1.0 {
            bail!("review.dpo_share and review.heldout_share must be in [0, 1) and sum below 1");
        }
        for o in [Objective::Cpt, Objective::Sft, Objective::Dpo] {
            c.training.train_config(o, c.seed)?;
        }
        if c.training.order == 0 {
            bail!("training.order must be at least 1");
        }
        for s in &c.metrics.meteor_stages {
            if !matches!(s.as_str(), "exact" | "stem" | "synonym") {
                bail!("metrics.meteor_stages: unknown stage {s:?}");
            }
        }
        Ok(())
    }

    /// Hash of the parsed config, so formatting and comments do not matter.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.config).expect("config serializes"))
    }
}
