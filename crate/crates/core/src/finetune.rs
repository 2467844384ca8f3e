//! Classifier fine-tuning, seeded replicates and best-run selection.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, MeanStd, Prediction, TextClassifier};
use crate::mlm::{stream_rng, Checkpoint, GRAD_CHUNK};
use crate::model::{log_softmax, read_params, write_params, Adam, ClassifierNet, EncoderConfig, ParamSet};
use crate::tasks::{DatasetSplit, Label, LabeledExample};
use crate::tokenizer::{TokenSequence, Vocab};

pub const CLASSIFIER_FORMAT: &str = "dapt-classifier-v1";

const STREAM_HEAD: u64 = 3 << 32;
const STREAM_SHUFFLE: u64 = 4 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub adam_epsilon: f64,
    pub max_len: usize,
    pub batch_size: usize,
    /// Steps of linear warm-up from zero; the rate is constant afterwards.
    pub warmup_steps: usize,
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            learning_rate: 1e-5,
            epochs: 5,
            adam_epsilon: 1e-8,
            max_len: 100,
            batch_size: 32,
            warmup_steps: 0,
            seed: 42,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_len < 2 {
            return Err(Error::invalid("batch_size must be positive and max_len at least 2"));
        }
        if !(self.learning_rate > 0.0 && self.adam_epsilon > 0.0) {
            return Err(Error::invalid("learning_rate and adam_epsilon must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }

    fn rate_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}

/// A fine-tuned encoder with its tokenizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub net: ClassifierNet,
    pub vocab: Vocab,
    pub max_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifierMeta {
    format: String,
    encoder: EncoderConfig,
    max_len: usize,
    num_params: usize,
}

/// Turns a score pair into a label; an exact tie is negative.
pub fn decide(scores: [f64; 2]) -> Prediction {
    let probs = log_softmax(&scores);
    Prediction {
        label: if scores[1] > scores[0] { Label::Positive } else { Label::Negative },
        positive_score: probs[1].exp(),
    }
}

impl ClassifierModel {
    fn encode(&self, text: &str) -> TokenSequence {
        self.vocab.encode(text, self.max_len.min(self.net.encoder.config.max_positions))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let params = dir.join("params.bin");
        let file = File::create(&params).map_err(|e| Error::io(&params, e))?;
        write_params(&self.net, BufWriter::new(file)).map_err(|e| Error::io(&params, e))?;
        let meta = ClassifierMeta {
            format: CLASSIFIER_FORMAT.to_string(),
            encoder: self.net.encoder.config.clone(),
            max_len: self.max_len,
            num_params: self.net.num_params(),
        };
        let cfg_path = dir.join("config.json");
        std::fs::write(&cfg_path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&cfg_path, e))?;
        self.vocab.save(&dir.join("vocab.txt"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("config.json");
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let meta: ClassifierMeta = serde_json::from_str(&text)?;
        if meta.format != CLASSIFIER_FORMAT {
            return Err(Error::format("classifier", format!("unsupported format {}", meta.format)));
        }
        let vocab = Vocab::load(&dir.join("vocab.txt"))?;
        let encoder = crate::model::Encoder::init(meta.encoder, &mut stream_rng(0, 0))?;
        let mut net = ClassifierNet::new(encoder, &mut stream_rng(0, STREAM_HEAD));
        let params = dir.join("params.bin");
        let file = File::open(&params).map_err(|e| Error::io(&params, e))?;
        read_params(&mut net, BufReader::new(file))?;
        Ok(ClassifierModel {
            net,
            vocab,
            max_len: meta.max_len,
        })
    }
}

impl TextClassifier for ClassifierModel {
    fn predict(&self, texts: &[&str]) -> Result<Vec<Prediction>> {
        texts
            .par_iter()
            .map(|t| Ok(decide(self.net.logits(&self.encode(t).ids)?)))
            .collect()
    }
}

pub fn predict(model: &ClassifierModel, texts: &[&str]) -> Result<Vec<Prediction>> {
    model.predict(texts)
}

fn batch_gradient(net: &ClassifierNet, batch: &[(&TokenSequence, usize)]) -> Result<(f64, ClassifierNet)> {
    let chunks: Vec<Result<(f64, ClassifierNet)>> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grad = net.zeros_like();
            let mut loss = 0.0;
            for (seq, class) in chunk {
                loss += net.accumulate_gradient(&seq.ids, *class, &mut grad)?;
            }
            Ok((loss, grad))
        })
        .collect();
    let mut total = 0.0;
    let mut grad: Option<ClassifierNet> = None;
    for chunk in chunks {
        let (l, g) = chunk?;
        total += l;
        match grad.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grad = Some(g),
        }
    }
    Ok((total, grad.unwrap_or_else(|| net.zeros_like())))
}

/// Adds a fresh head to the checkpoint's encoder and trains both on `train`.
pub fn finetune(ckpt: &Checkpoint, train: &[LabeledExample], cfg: &FinetuneConfig) -> Result<ClassifierModel> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("fine-tuning needs at least one training example"));
    }
    if ckpt.model.config().vocab_size != ckpt.vocab.len() {
        return Err(Error::invalid("checkpoint vocabulary does not match its tokenizer"));
    }
    let mut model = ClassifierModel {
        net: ClassifierNet::new(ckpt.model.encoder.clone(), &mut stream_rng(cfg.seed, STREAM_HEAD)),
        vocab: ckpt.vocab.clone(),
        max_len: cfg.max_len,
    };
    let data: Vec<(TokenSequence, usize)> = train.iter().map(|e| (model.encode(&e.text), e.label.class_index())).collect();
    let mut opt = Adam::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, STREAM_SHUFFLE | epoch as u64));
        let mut epoch_loss = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(&TokenSequence, usize)> = idx.iter().map(|&i| (&data[i].0, data[i].1)).collect();
            let (loss, mut grad) = batch_gradient(&model.net, &batch)?;
            let mean = loss / batch.len() as f64;
            if !mean.is_finite() || !grad.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    learning_rate: cfg.rate_at(step),
                    loss: mean,
                });
            }
            grad.scale(1.0 / batch.len() as f64);
            opt.update(&mut model.net, &grad, cfg.rate_at(step));
            step += 1;
            epoch_loss += loss;
        }
        info!("fine-tune epoch {epoch}: mean loss {:.4}", epoch_loss / data.len() as f64);
    }
    Ok(model)
}

/// One seeded fine-tune plus its in-dataset test evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub dataset: String,
    pub model: String,
    pub config: FinetuneConfig,
    pub runs: Vec<RunResult>,
    pub macro_f1: MeanStd,
    pub positive_f1: MeanStd,
    pub negative_f1: MeanStd,
    pub positive_precision: MeanStd,
    pub positive_recall: MeanStd,
    /// Seed of the run with the highest test macro-F1, lowest seed on ties.
    pub best_seed: u64,
    /// Trained classifiers in run order; not part of the serialized summary.
    #[serde(skip)]
    pub models: Vec<ClassifierModel>,
}

impl ReplicateSummary {
    /// Aggregates finished runs. `models`, when non-empty, must follow run order.
    pub fn from_runs(dataset: &str, model: &str, config: FinetuneConfig, runs: Vec<RunResult>, models: Vec<ClassifierModel>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::invalid("a replicate summary needs at least one run"));
        }
        if !models.is_empty() && models.len() != runs.len() {
            return Err(Error::invalid("model count does not match run count"));
        }
        let stat = |f: fn(&EvalReport) -> f64| MeanStd::of(&runs.iter().map(|r| f(&r.report)).collect::<Vec<_>>());
        let best_seed = runs[best_index(&runs)].seed;
        Ok(ReplicateSummary {
            dataset: dataset.to_string(),
            model: model.to_string(),
            config,
            macro_f1: stat(|r| r.macro_f1),
            positive_f1: stat(|r| r.positive.f1),
            negative_f1: stat(|r| r.negative.f1),
            positive_precision: stat(|r| r.positive.precision),
            positive_recall: stat(|r| r.positive.recall),
            best_seed,
            runs,
            models,
        })
    }

    pub fn best_run(&self) -> &RunResult {
        &self.runs[best_index(&self.runs)]
    }
}

fn best_index(runs: &[RunResult]) -> usize {
    let mut best = 0;
    for (i, r) in runs.iter().enumerate().skip(1) {
        let b = &runs[best];
        if r.report.macro_f1 > b.report.macro_f1 || (r.report.macro_f1 == b.report.macro_f1 && r.seed < b.seed) {
            best = i;
        }
    }
    best
}

/// Fine-tunes once per seed on `split.train` and evaluates on `split.test`.
/// Runs execute in parallel; results are ordered as `seeds`.
pub fn replicate(ckpt: &Checkpoint, model_name: &str, split: &DatasetSplit, cfg: &FinetuneConfig, seeds: &[u64]) -> Result<ReplicateSummary> {
    if seeds.is_empty() {
        return Err(Error::invalid("replicate needs at least one seed"));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("replicate seeds must be distinct"));
    }
    let outcomes: Vec<Result<(RunResult, ClassifierModel)>> = seeds
        .par_iter()
        .map(|&seed| {
            let run_cfg = FinetuneConfig { seed, ..cfg.clone() };
            let model = finetune(ckpt, &split.train, &run_cfg)?;
            let report = evaluate(&model, model_name, split.name(), &split.test)?;
            info!("{} seed {seed}: macro-F1 {:.4}", split.name(), report.macro_f1);
            Ok((RunResult { seed, report }, model))
        })
        .collect();
    let (runs, models): (Vec<_>, Vec<_>) = outcomes.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    ReplicateSummary::from_runs(split.name(), model_name, cfg.clone(), runs, models)
}

/// The persisted model of the best run.
pub fn select_best(summary: &ReplicateSummary) -> Result<&ClassifierModel> {
    if summary.models.len() != summary.runs.len() || summary.models.is_empty() {
        return Err(Error::invalid("summary holds no persisted models"));
    }
    Ok(&summary.models[best_index(&summary.runs)])
}
