//! One function per pipeline stage. Every stage reads absolute input paths,
//! writes below the output directory and reports what it touched.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dapt_core::corpus::{self, read_allowlist, render_stats, Corpus, CorpusConfig, StatsReport};
use dapt_core::finetune::{replicate, ClassifierModel, ReplicateSummary};
use dapt_core::metrics::{self, evaluate, InDatasetRow, PortabilityMatrix, ReportSet};
use dapt_core::mlm::{perplexity, retrain, Checkpoint};
use dapt_core::preprocess::{preprocess, EmojiAliasTable};
use dapt_core::tasks::{self, DatasetSpec, DatasetSplit};
use dapt_core::tokenizer::Vocab;
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::PipelineConfig;

/// A fully resolved stage invocation, recorded verbatim in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "kebab-case")]
pub enum Stage {
    BuildCorpus {
        dumps: Vec<PathBuf>,
        allowlist: Option<PathBuf>,
    },
    TrainVocab {
        corpus: PathBuf,
    },
    Pretrain {
        corpus: PathBuf,
        heldout: Option<PathBuf>,
        vocab: PathBuf,
        from: Option<PathBuf>,
        name: String,
    },
    Finetune {
        checkpoint: PathBuf,
        model_name: String,
        datasets: Vec<String>,
    },
    Evaluate {
        classifier: PathBuf,
        model_name: String,
        dataset: String,
    },
    Portability {
        model_name: String,
        finetune_dir: PathBuf,
    },
    Report {
        inputs: Vec<PathBuf>,
    },
}

impl Stage {
    pub fn command(&self) -> &'static str {
        match self {
            Stage::BuildCorpus { .. } => "build-corpus",
            Stage::TrainVocab { .. } => "train-vocab",
            Stage::Pretrain { .. } => "pretrain",
            Stage::Finetune { .. } => "finetune",
            Stage::Evaluate { .. } => "evaluate",
            Stage::Portability { .. } => "portability",
            Stage::Report { .. } => "report",
        }
    }
}

#[derive(Debug, Default)]
pub struct StageOutcome {
    pub inputs: Vec<PathBuf>,
    /// Relative to the output directory.
    pub outputs: Vec<PathBuf>,
    pub notes: serde_json::Value,
}

impl StageOutcome {
    fn input(&mut self, p: &Path) {
        if !self.inputs.iter().any(|q| q == p) {
            self.inputs.push(p.to_path_buf());
        }
    }
}

struct Writer<'a> {
    out: &'a Path,
    written: Vec<PathBuf>,
}

impl<'a> Writer<'a> {
    fn new(out: &'a Path) -> Self {
        Writer { out, written: Vec::new() }
    }

    fn write(&mut self, rel: impl AsRef<Path>, bytes: impl AsRef<[u8]>) -> Result<()> {
        let rel = rel.as_ref();
        let path = self.out.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(rel.to_path_buf());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: impl AsRef<Path>, value: &T) -> Result<()> {
        self.write(rel, serde_json::to_string_pretty(value)? + "\n")
    }

    /// Records files that a library call wrote into `rel_dir`.
    fn adopt_dir(&mut self, rel_dir: impl AsRef<Path>) -> Result<()> {
        let dir = self.out.join(rel_dir.as_ref());
        for f in crate::manifest::files_under(&dir)? {
            let rel = f.strip_prefix(self.out).expect("inside output dir").to_path_buf();
            if !self.written.contains(&rel) {
                self.written.push(rel);
            }
        }
        Ok(())
    }
}

/// The emoji alias table named by the config, or the pinned one.
pub fn alias_table(cfg: &PipelineConfig, outcome: Option<&mut StageOutcome>) -> Result<EmojiAliasTable> {
    match &cfg.preprocess.emoji_table {
        Some(p) => {
            if let Some(o) = outcome {
                o.input(p);
            }
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(EmojiAliasTable::parse(&text)?)
        }
        None => Ok(EmojiAliasTable::pinned().clone()),
    }
}

pub fn dataset_specs(cfg: &PipelineConfig) -> Result<Vec<DatasetSpec>> {
    let specs = match &cfg.datasets.spec_file {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            DatasetSpec::parse_many(&text)?
        }
        None => DatasetSpec::bundled(),
    };
    Ok(specs.iter().map(|s| s.resolved(&cfg.datasets.root)).collect())
}

fn load_dataset(cfg: &PipelineConfig, name: &str, aliases: &EmojiAliasTable, o: &mut StageOutcome) -> Result<DatasetSplit> {
    let specs = dataset_specs(cfg)?;
    let spec = specs
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| anyhow!("dataset {name:?} is not defined in the dataset layout file"))?;
    if let Some(p) = &cfg.datasets.spec_file {
        o.input(p);
    }
    o.input(&spec.train);
    o.input(&spec.test);
    let split = tasks::load_with_mode(spec, cfg.preprocess.dataset_mode, aliases)?;
    let report = tasks::validate(&split);
    if !report.passed() {
        for f in report.failures() {
            log::warn!("{name}: {} is {}, expected {}", f.name, f.actual, f.expected);
        }
    }
    Ok(split)
}

pub fn execute(stage: &Stage, cfg: &PipelineConfig, out: &Path) -> Result<StageOutcome> {
    let mut o = StageOutcome::default();
    let mut w = Writer::new(out);
    match stage {
        Stage::BuildCorpus { dumps, allowlist } => build_corpus(cfg, dumps, allowlist.as_deref(), &mut o, &mut w)?,
        Stage::TrainVocab { corpus } => {
            o.input(corpus);
            let c = Corpus::load_jsonl(corpus)?;
            let vocab = Vocab::train(c.texts(), cfg.tokenizer.vocab_size, cfg.tokenizer.uncased)?;
            w.write("vocab/vocab.txt", vocab.to_file_string())?;
            o.notes = json!({ "vocab_size": vocab.len(), "documents": c.len() });
        }
        Stage::Pretrain {
            corpus,
            heldout,
            vocab,
            from,
            name,
        } => pretrain(cfg, corpus, heldout.as_deref(), vocab, from.as_deref(), name, &mut o, &mut w)?,
        Stage::Finetune {
            checkpoint,
            model_name,
            datasets,
        } => finetune(cfg, checkpoint, model_name, datasets, &mut o, &mut w)?,
        Stage::Evaluate {
            classifier,
            model_name,
            dataset,
        } => {
            let aliases = alias_table(cfg, Some(&mut o))?;
            for f in crate::manifest::files_under(classifier)? {
                o.input(&f);
            }
            let model = ClassifierModel::load(classifier)?;
            let split = load_dataset(cfg, dataset, &aliases, &mut o)?;
            let report = evaluate(&model, model_name, dataset, &split.test)?;
            o.notes = json!({ "macro_f1": report.macro_f1 });
            w.json(format!("eval/{model_name}/{dataset}.json"), &report)?;
        }
        Stage::Portability { model_name, finetune_dir } => portability(cfg, model_name, finetune_dir, &mut o, &mut w)?,
        Stage::Report { inputs } => report(inputs, &mut o, &mut w)?,
    }
    o.outputs = w.written;
    Ok(o)
}

fn build_corpus(cfg: &PipelineConfig, dumps: &[PathBuf], allowlist: Option<&Path>, o: &mut StageOutcome, w: &mut Writer) -> Result<()> {
    if dumps.is_empty() {
        bail!("build-corpus needs at least one dump file (corpus.dumps or positional arguments)");
    }
    let c = &cfg.corpus;
    let communities = match allowlist {
        Some(p) => {
            o.input(p);
            read_allowlist(p)?
        }
        None => CorpusConfig::banned_communities().allowlist().iter().cloned().collect(),
    };
    let ccfg = CorpusConfig::new(communities, c.window_start, c.window_end)?.with_drop_bodies(c.drop_bodies.clone());
    for d in dumps {
        o.input(d);
    }
    let aliases = alias_table(cfg, Some(o))?;
    let mode = cfg.preprocess.corpus_mode;
    let built = corpus::build_files(dumps, &ccfg, |t| preprocess(t, mode, &aliases), c.workers)?;
    let split = corpus::split(&built.corpus, c.heldout_size, cfg.seed)?;
    info!(
        "accepted {} of {} lines; {} train / {} held out",
        built.report.accepted,
        built.report.total_lines,
        split.train.len(),
        split.heldout.len()
    );
    let jsonl = |corpus: &Corpus| -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        corpus.write_jsonl(&mut buf)?;
        Ok(buf)
    };
    w.write("corpus/corpus.jsonl", jsonl(&built.corpus)?)?;
    w.write("corpus/train.jsonl", jsonl(&split.train)?)?;
    w.write("corpus/heldout.jsonl", jsonl(&split.heldout)?)?;
    w.write("corpus/stats.tsv", render_stats(&built.corpus))?;
    w.json(
        "corpus/stats.json",
        &json!({
            "build": built.report,
            "stats": StatsReport::new(&built.corpus),
            "split": { "seed": cfg.seed, "train": split.train.len(), "heldout": split.heldout.len() },
            "window": [c.window_start, c.window_end],
            "allowlist": ccfg.allowlist(),
        }),
    )?;
    o.notes = json!({ "accepted": built.report.accepted, "train": split.train.len(), "heldout": split.heldout.len() });
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn pretrain(
    cfg: &PipelineConfig,
    corpus: &Path,
    heldout: Option<&Path>,
    vocab_path: &Path,
    from: Option<&Path>,
    name: &str,
    o: &mut StageOutcome,
    w: &mut Writer,
) -> Result<()> {
    o.input(corpus);
    o.input(vocab_path);
    let train = Corpus::load_jsonl(corpus)?;
    let vocab = Vocab::load(vocab_path)?;
    let start = match from {
        Some(dir) => {
            for f in crate::manifest::files_under(dir)? {
                o.input(&f);
            }
            let ck = Checkpoint::load(dir)?;
            if ck.vocab != vocab {
                bail!("checkpoint {} was trained with a different vocabulary", dir.display());
            }
            ck
        }
        None => Checkpoint::init(cfg.encoder_config(vocab.len()), vocab.clone(), cfg.seed)?,
    };
    let heldout = match heldout {
        Some(p) => {
            o.input(p);
            Some(Corpus::load_jsonl(p)?)
        }
        None => None,
    };
    let ppl = |ck: &Checkpoint| -> Result<Option<f64>> {
        match &heldout {
            Some(h) if !h.is_empty() => Ok(Some(perplexity(&ck.model, &ck.vocab, h, &cfg.masking, cfg.seed, cfg.retrain.max_len)?)),
            _ => Ok(None),
        }
    };
    let before = ppl(&start)?;
    let trained = retrain(&start, &train, &cfg.retrain_config(), &cfg.masking)?;
    let after = ppl(&trained)?;
    let rel = PathBuf::from("checkpoints").join(name);
    trained.save(&w.out.join(&rel))?;
    w.adopt_dir(&rel)?;
    let summary = json!({
        "heldout_perplexity_before": before,
        "heldout_perplexity_after": after,
        "first_epoch_loss": trained.history.first().map(|r| r.mean_loss),
        "final_epoch_loss": trained.history.last().map(|r| r.mean_loss),
        "steps": trained.steps,
    });
    w.json(rel.join("perplexity.json"), &summary)?;
    o.notes = summary;
    Ok(())
}

fn finetune(cfg: &PipelineConfig, checkpoint: &Path, model_name: &str, datasets: &[String], o: &mut StageOutcome, w: &mut Writer) -> Result<()> {
    for f in crate::manifest::files_under(checkpoint)? {
        o.input(&f);
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let aliases = alias_table(cfg, Some(o))?;
    let seeds = &cfg.finetune.seeds;
    let mut notes = serde_json::Map::new();
    for dataset in datasets {
        let split = load_dataset(cfg, dataset, &aliases, o)?;
        let summary = replicate(&ckpt, model_name, &split, &cfg.finetune_config(seeds[0]), seeds)?;
        let base = PathBuf::from("finetune").join(model_name).join(dataset);
        let mut runs = Vec::new();
        for (run, model) in summary.runs.iter().zip(&summary.models) {
            let rel = base.join(format!("seed-{}", run.seed));
            model.save(&w.out.join(&rel))?;
            w.adopt_dir(&rel)?;
            w.json(rel.join("report.json"), &run.report)?;
            runs.push(json!({ "seed": run.seed, "macro_f1": run.report.macro_f1, "model": rel }));
        }
        let best_seed = summary.best_seed;
        w.json(base.join("summary.json"), &summary)?;
        w.write(base.join("summary.txt"), summary_table(&summary))?;
        w.json(
            base.join("best.json"),
            &json!({ "seed": best_seed, "model": format!("seed-{best_seed}"), "criterion": "in-dataset test macro-F1, ties to lowest seed" }),
        )?;
        notes.insert(
            dataset.clone(),
            json!({ "runs": runs, "best_seed": best_seed, "macro_f1_mean": summary.macro_f1.mean, "macro_f1_std": summary.macro_f1.std }),
        );
    }
    o.notes = serde_json::Value::Object(notes);
    Ok(())
}

fn summary_table(s: &ReplicateSummary) -> String {
    let mut out = format!("{} on {} ({} runs, population std)\n", s.model, s.dataset, s.runs.len());
    out.push_str("seed\tmacro_f1\tpos_p\tpos_r\tpos_f1\n");
    for r in &s.runs {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.seed,
            metrics::format_score(r.report.macro_f1),
            metrics::format_score(r.report.positive.precision),
            metrics::format_score(r.report.positive.recall),
            metrics::format_score(r.report.positive.f1)
        ));
    }
    out.push_str(&format!(
        "mean±std\t{}\t{}\t{}\t{}\nbest seed\t{}\n",
        metrics::format_mean_std(&s.macro_f1),
        metrics::format_mean_std(&s.positive_precision),
        metrics::format_mean_std(&s.positive_recall),
        metrics::format_mean_std(&s.positive_f1),
        s.best_seed
    ));
    out
}

fn best_model_dir(finetune_dir: &Path, dataset: &str) -> Result<PathBuf> {
    let dir = finetune_dir.join(dataset);
    let best_path = dir.join("best.json");
    let text = std::fs::read_to_string(&best_path)
        .with_context(|| format!("no fine-tuned model for {dataset}: cannot read {}", best_path.display()))?;
    let best: serde_json::Value = serde_json::from_str(&text)?;
    let rel = best["model"].as_str().ok_or_else(|| anyhow!("{} lacks a model entry", best_path.display()))?;
    Ok(dir.join(rel))
}

fn portability(cfg: &PipelineConfig, model_name: &str, finetune_dir: &Path, o: &mut StageOutcome, w: &mut Writer) -> Result<()> {
    let aliases = alias_table(cfg, Some(o))?;
    let names = &cfg.evaluation.datasets;
    let mut models = Vec::new();
    let mut splits = Vec::new();
    for name in names {
        let dir = best_model_dir(finetune_dir, name)?;
        o.input(&finetune_dir.join(name).join("best.json"));
        for f in crate::manifest::files_under(&dir)? {
            o.input(&f);
        }
        models.push(ClassifierModel::load(&dir)?);
        splits.push(load_dataset(cfg, name, &aliases, o)?);
    }
    let model_refs: Vec<(&str, &ClassifierModel)> = names.iter().map(String::as_str).zip(&models).collect();
    let split_refs: Vec<(&str, &DatasetSplit)> = names.iter().map(String::as_str).zip(&splits).collect();
    let matrix = metrics::portability(model_name, &model_refs, &split_refs)?;
    let doc = metrics::render(&ReportSet {
        portability: vec![matrix.clone()],
        ..Default::default()
    })?;
    w.json(format!("portability/{model_name}.json"), &matrix)?;
    w.write(format!("portability/{model_name}.txt"), doc.text)?;
    o.notes = json!({ "cells": matrix.cells.len(), "off_diagonal": matrix.off_diagonal().count() });
    Ok(())
}

/// Default report inputs: every replicate summary and portability grid under `out`.
pub fn discover_report_inputs(out: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for sub in ["finetune", "portability"] {
        let dir = out.join(sub);
        if dir.is_dir() {
            found.extend(
                crate::manifest::files_under(&dir)?
                    .into_iter()
                    .filter(|p| p.file_name().is_some_and(|n| n == "summary.json") || (sub == "portability" && p.extension().is_some_and(|e| e == "json"))),
            );
        }
    }
    Ok(found)
}

fn report(inputs: &[PathBuf], o: &mut StageOutcome, w: &mut Writer) -> Result<()> {
    let mut set = ReportSet::default();
    for p in inputs {
        o.input(p);
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        if let Ok(s) = serde_json::from_str::<ReplicateSummary>(&text) {
            set.in_dataset.push(InDatasetRow {
                dataset: s.dataset.clone(),
                model: s.model.clone(),
                runs: s.runs.len(),
                macro_f1: s.macro_f1,
                positive_f1: s.positive_f1,
            });
        } else if let Ok(m) = serde_json::from_str::<PortabilityMatrix>(&text) {
            set.portability.push(m);
        } else {
            bail!("{} is neither a replicate summary nor a portability grid", p.display());
        }
    }
    let doc = metrics::render(&set)?;
    w.write("reports/report.txt", doc.text)?;
    w.write("reports/report.json", doc.json)?;
    o.notes = json!({ "in_dataset_rows": set.in_dataset.len(), "grids": set.portability.len() });
    Ok(())
}
