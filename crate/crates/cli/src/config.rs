//! Pipeline configuration: one TOML file, every key optional, unknown keys rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dapt_core::corpus::{YearMonth, DEFAULT_DROP_BODIES};
use dapt_core::finetune::FinetuneConfig;
use dapt_core::mlm::{MaskingConfig, RetrainConfig};
use dapt_core::model::EncoderConfig;
use dapt_core::preprocess::PreprocessMode;
use serde::{Deserialize, Serialize};

/// The bundled defaults file; kept in sync with `PipelineConfig::default()` by a test.
pub const DEFAULTS_TOML: &str = include_str!("../defaults.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Drives model initialization, the corpus split and retraining.
    pub seed: u64,
    pub corpus: CorpusSection,
    pub preprocess: PreprocessSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub retrain: RetrainSection,
    pub masking: MaskingConfig,
    pub finetune: FinetuneSection,
    pub datasets: DatasetsSection,
    pub evaluation: EvaluationSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub dumps: Vec<PathBuf>,
    /// Community allowlist file; the bundled banned-community list when unset.
    pub allowlist: Option<PathBuf>,
    pub window_start: YearMonth,
    pub window_end: YearMonth,
    pub drop_bodies: Vec<String>,
    pub heldout_size: usize,
    /// Parallel shard readers; output does not depend on it.
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSection {
    pub corpus_mode: PreprocessMode,
    pub dataset_mode: PreprocessMode,
    /// Replacement emoji alias table; the pinned table when unset.
    pub emoji_table: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    pub vocab_size: usize,
    pub uncased: bool,
}

/// Encoder shape; the vocabulary size comes from the trained vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub max_positions: usize,
    pub layer_norm_eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub adam_epsilon: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub max_len: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    /// One replicate per seed.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetsSection {
    /// Directory that relative dataset paths are resolved against.
    pub root: PathBuf,
    /// Dataset layout file; the bundled official layouts when unset.
    pub spec_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    /// Datasets of the portability grid, in row and column order.
    pub datasets: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            corpus: CorpusSection::default(),
            preprocess: PreprocessSection::default(),
            tokenizer: TokenizerSection::default(),
            model: ModelSection::default(),
            retrain: RetrainSection::default(),
            masking: MaskingConfig::default(),
            finetune: FinetuneSection::default(),
            datasets: DatasetsSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            dumps: Vec::new(),
            allowlist: None,
            window_start: YearMonth { year: 2012, month: 1 },
            window_end: YearMonth { year: 2015, month: 6 },
            drop_bodies: DEFAULT_DROP_BODIES.iter().map(|s| s.to_string()).collect(),
            heldout_size: 14_932,
            workers: 4,
        }
    }
}

impl Default for PreprocessSection {
    fn default() -> Self {
        PreprocessSection {
            corpus_mode: PreprocessMode::Retraining,
            dataset_mode: PreprocessMode::Finetuning,
            emoji_table: None,
        }
    }
}

impl Default for TokenizerSection {
    fn default() -> Self {
        TokenizerSection {
            vocab_size: 2_000,
            uncased: true,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let desk = EncoderConfig::desk(0);
        ModelSection {
            hidden: desk.hidden,
            layers: desk.layers,
            heads: desk.heads,
            intermediate: desk.intermediate,
            max_positions: desk.max_positions,
            layer_norm_eps: desk.layer_norm_eps,
        }
    }
}

impl Default for RetrainSection {
    fn default() -> Self {
        let r = RetrainConfig::default();
        RetrainSection {
            epochs: r.epochs,
            batch_size: r.batch_size,
            max_len: r.max_len,
            learning_rate: r.learning_rate,
            adam_beta1: r.adam_beta1,
            adam_beta2: r.adam_beta2,
            adam_epsilon: r.adam_epsilon,
        }
    }
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        FinetuneSection {
            learning_rate: f.learning_rate,
            epochs: f.epochs,
            adam_epsilon: f.adam_epsilon,
            adam_beta1: f.adam_beta1,
            adam_beta2: f.adam_beta2,
            max_len: f.max_len,
            batch_size: f.batch_size,
            warmup_steps: f.warmup_steps,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

impl Default for DatasetsSection {
    fn default() -> Self {
        DatasetsSection {
            root: PathBuf::from("data"),
            spec_file: None,
        }
    }
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            datasets: vec!["offenseval".into(), "abuseval".into(), "hateval".into()],
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| anyhow::anyhow!("configuration error: {e}"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Reads `path` (if any), applies `key=value` overrides in order, and
    /// resolves relative paths against the config file's directory (or the
    /// working directory when there is no file), so snapshots are position independent.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (text, base) = match path {
            Some(p) => (
                std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
                p.parent().map(Path::to_path_buf).unwrap_or_default(),
            ),
            None => (String::new(), std::env::current_dir().context("reading the working directory")?),
        };
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| anyhow::anyhow!("configuration error: {e}"))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg = PipelineConfig::deserialize(toml::Value::Table(table))
            .map_err(|e| anyhow::anyhow!("configuration error: {e}"))?;
        let base = if base.is_absolute() {
            base
        } else {
            std::env::current_dir().context("reading the working directory")?.join(base)
        };
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !base.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        self.corpus.dumps.iter_mut().for_each(fix);
        if let Some(p) = self.corpus.allowlist.as_mut() {
            fix(p);
        }
        if let Some(p) = self.preprocess.emoji_table.as_mut() {
            fix(p);
        }
        fix(&mut self.datasets.root);
        if let Some(p) = self.datasets.spec_file.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.finetune.seeds.is_empty() {
            bail!("configuration error: finetune.seeds is empty");
        }
        self.masking.validate()?;
        self.retrain_config().validate()?;
        self.finetune_config(self.finetune.seeds[0]).validate()?;
        if self.corpus.window_start > self.corpus.window_end {
            bail!("configuration error: corpus.window_start is after corpus.window_end");
        }
        Ok(())
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        let m = &self.model;
        EncoderConfig {
            vocab_size,
            hidden: m.hidden,
            layers: m.layers,
            heads: m.heads,
            intermediate: m.intermediate,
            max_positions: m.max_positions,
            layer_norm_eps: m.layer_norm_eps,
        }
    }

    pub fn retrain_config(&self) -> RetrainConfig {
        let r = &self.retrain;
        RetrainConfig {
            epochs: r.epochs,
            batch_size: r.batch_size,
            max_len: r.max_len,
            learning_rate: r.learning_rate,
            adam_beta1: r.adam_beta1,
            adam_beta2: r.adam_beta2,
            adam_epsilon: r.adam_epsilon,
            seed: self.seed,
        }
    }

    pub fn finetune_config(&self, seed: u64) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            learning_rate: f.learning_rate,
            epochs: f.epochs,
            adam_epsilon: f.adam_epsilon,
            max_len: f.max_len,
            batch_size: f.batch_size,
            warmup_steps: f.warmup_steps,
            seed,
            adam_beta1: f.adam_beta1,
            adam_beta2: f.adam_beta2,
        }
    }
}

/// `a.b.c=value`; the value is parsed as a TOML value, falling back to a string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("override {spec:?} is not of the form key=value");
    };
    let key = key.trim();
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow::anyhow!("override {key}: {p} is not a section"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
