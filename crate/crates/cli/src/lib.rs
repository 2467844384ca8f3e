//! Command-line driver for the adaptation pipeline. Each subcommand runs one
//! stage and appends a manifest that `reproduce` can check.

pub mod config;
pub mod manifest;
pub mod stages;

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dapt_core::preprocess::{preprocess, PreprocessMode};

use crate::config::PipelineConfig;
use crate::manifest::{compare, digest_file, FileDigest, RunManifest, MANIFEST_FORMAT};
use crate::stages::{alias_table, execute, Stage};

#[derive(Debug, Parser)]
#[command(name = "dapt", version, about = "Domain-adaptive retraining and evaluation pipeline")]
pub struct Cli {
    /// TOML configuration file; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the top-level seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// `section.key=value` override, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter and clean comment dumps into a corpus with a held-out split.
    BuildCorpus {
        /// Dump files; defaults to `corpus.dumps`.
        dumps: Vec<PathBuf>,
        #[arg(long)]
        allowlist: Option<PathBuf>,
    },
    /// Learn a WordPiece vocabulary from a corpus.
    TrainVocab {
        /// Defaults to `<out>/corpus/train.jsonl`.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Masked-language-model training, from scratch or from a checkpoint.
    Pretrain {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Held-out corpus for perplexity; defaults to `<out>/corpus/heldout.jsonl` if present.
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Checkpoint to continue from; a fresh model is initialized otherwise.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, default_value = "retrained")]
        name: String,
    },
    /// Seeded fine-tuning replicates on labeled datasets.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the checkpoint directory name.
        #[arg(long)]
        model_name: Option<String>,
        /// Defaults to `evaluation.datasets`.
        #[arg(long = "dataset")]
        datasets: Vec<String>,
    },
    /// Scores one fine-tuned classifier on a dataset's test split.
    Evaluate {
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        model_name: Option<String>,
    },
    /// Cross-dataset grid from the best replicate on each dataset.
    Portability {
        #[arg(long)]
        model_name: String,
        /// Defaults to `<out>/finetune/<model-name>`.
        #[arg(long)]
        finetune_dir: Option<PathBuf>,
    },
    /// Renders result tables from summaries and portability grids.
    Report {
        /// Defaults to every summary and grid under the output directory.
        inputs: Vec<PathBuf>,
    },
    /// Re-runs a recorded stage into a scratch directory and compares digests.
    Reproduce { manifest: PathBuf },
    /// Cleans text from stdin, one message per line, to stdout.
    Preprocess {
        #[arg(long, default_value = "finetuning")]
        mode: PreprocessMode,
    },
}

fn absolute(p: &Path) -> Result<PathBuf> {
    if p.is_absolute() {
        Ok(p.to_path_buf())
    } else {
        Ok(std::env::current_dir()?.join(p))
    }
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

/// Turns parsed arguments into a fully resolved stage, filling defaults
/// from the config and the output layout.
pub fn resolve_stage(command: Command, cfg: &PipelineConfig, out: &Path) -> Result<Stage> {
    let abs = |p: PathBuf| absolute(&p);
    let abs_opt = |p: Option<PathBuf>| p.map(|p| absolute(&p)).transpose();
    Ok(match command {
        Command::BuildCorpus { dumps, allowlist } => Stage::BuildCorpus {
            dumps: if dumps.is_empty() {
                cfg.corpus.dumps.clone()
            } else {
                dumps.into_iter().map(abs).collect::<Result<_>>()?
            },
            allowlist: abs_opt(allowlist)?.or_else(|| cfg.corpus.allowlist.clone()),
        },
        Command::TrainVocab { corpus } => Stage::TrainVocab {
            corpus: abs_opt(corpus)?.unwrap_or_else(|| out.join("corpus/train.jsonl")),
        },
        Command::Pretrain {
            corpus,
            heldout,
            vocab,
            from,
            name,
        } => {
            let default_heldout = out.join("corpus/heldout.jsonl");
            Stage::Pretrain {
                corpus: abs_opt(corpus)?.unwrap_or_else(|| out.join("corpus/train.jsonl")),
                heldout: abs_opt(heldout)?.or_else(|| default_heldout.is_file().then_some(default_heldout)),
                vocab: abs_opt(vocab)?.unwrap_or_else(|| out.join("vocab/vocab.txt")),
                from: abs_opt(from)?,
                name,
            }
        }
        Command::Finetune {
            checkpoint,
            model_name,
            datasets,
        } => Stage::Finetune {
            model_name: model_name.unwrap_or_else(|| dir_name(&checkpoint)),
            checkpoint: abs(checkpoint)?,
            datasets: if datasets.is_empty() {
                cfg.evaluation.datasets.clone()
            } else {
                datasets
            },
        },
        Command::Evaluate {
            classifier,
            dataset,
            model_name,
        } => Stage::Evaluate {
            model_name: model_name.unwrap_or_else(|| dir_name(&classifier)),
            classifier: abs(classifier)?,
            dataset,
        },
        Command::Portability {
            model_name,
            finetune_dir,
        } => Stage::Portability {
            finetune_dir: abs_opt(finetune_dir)?.unwrap_or_else(|| out.join("finetune").join(&model_name)),
            model_name,
        },
        Command::Report { inputs } => Stage::Report {
            inputs: if inputs.is_empty() {
                stages::discover_report_inputs(out)?
            } else {
                inputs.into_iter().map(abs).collect::<Result<_>>()?
            },
        },
        Command::Reproduce { .. } | Command::Preprocess { .. } => bail!("not a pipeline stage"),
    })
}

fn digests(paths: &[PathBuf], base: Option<&Path>) -> Result<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| {
            let mut d = digest_file(&base.map(|b| b.join(p)).unwrap_or_else(|| p.clone()))?;
            d.path = p.clone();
            Ok(d)
        })
        .collect()
}

/// Runs one stage and records its manifest. Returns the manifest path.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig, out: &Path) -> Result<(PathBuf, RunManifest)> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let clock = Instant::now();
    let outcome = execute(&stage, cfg, out)?;
    let wall_seconds = clock.elapsed().as_secs_f64();
    let seeds = match &stage {
        Stage::Finetune { .. } => cfg.finetune.seeds.clone(),
        _ => vec![cfg.seed],
    };
    let formats: BTreeMap<String, String> = [
        ("manifest", MANIFEST_FORMAT),
        ("checkpoint", dapt_core::mlm::CHECKPOINT_FORMAT),
        ("classifier", dapt_core::finetune::CLASSIFIER_FORMAT),
        ("report", dapt_core::metrics::REPORT_SCHEMA),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    let manifest = RunManifest {
        format: MANIFEST_FORMAT.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: stage.command().to_string(),
        stage,
        config: cfg.clone(),
        seeds,
        inputs: digests(&outcome.inputs, None)?,
        outputs: digests(&outcome.outputs, Some(out))?,
        started_unix,
        wall_seconds,
        formats,
        notes: outcome.notes,
    };
    let path = manifest.append(out)?;
    Ok((path, manifest))
}

#[derive(Debug, Default)]
pub struct ReproduceReport {
    pub input_mismatches: Vec<String>,
    pub output_mismatches: Vec<String>,
}

impl ReproduceReport {
    pub fn clean(&self) -> bool {
        self.input_mismatches.is_empty() && self.output_mismatches.is_empty()
    }
}

/// Re-executes the manifest's stage with its recorded config in a scratch
/// directory and compares input and output digests with the record.
pub fn reproduce(manifest_path: &Path) -> Result<ReproduceReport> {
    let m = RunManifest::load(manifest_path)?;
    let mut report = ReproduceReport::default();
    let mut present = Vec::new();
    for d in &m.inputs {
        if d.path.is_file() {
            present.push(digest_file(&d.path)?);
        }
    }
    report.input_mismatches = compare(&m.inputs, &present);
    let scratch = tempfile::tempdir().context("creating scratch directory")?;
    match execute(&m.stage, &m.config, scratch.path()) {
        Ok(outcome) => {
            let fresh = digests(&outcome.outputs, Some(scratch.path()))?;
            report.output_mismatches = compare(&m.outputs, &fresh);
        }
        Err(e) => report.output_mismatches.push(format!("re-run failed: {e:#}")),
    }
    Ok(report)
}

fn preprocess_stdin(cfg: &PipelineConfig, mode: PreprocessMode) -> Result<()> {
    let aliases = alias_table(cfg, None)?;
    let mut input = String::new();
    std::io::stdin().read_to_string(&mut input)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for line in input.lines() {
        writeln!(out, "{}", preprocess(line, mode, &aliases).replace('\n', " "))?;
    }
    Ok(())
}

/// Entry point shared by the binary and the tests. Returns the exit code.
pub fn run(cli: Cli) -> Result<i32> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = absolute(&cli.out)?;
    match cli.command {
        Command::Preprocess { mode } => {
            preprocess_stdin(&cfg, mode)?;
            Ok(0)
        }
        Command::Reproduce { manifest } => {
            let report = reproduce(&manifest)?;
            for line in &report.input_mismatches {
                println!("input changed: {line}");
            }
            for line in &report.output_mismatches {
                println!("output mismatch: {line}");
            }
            if report.clean() {
                println!("reproduced: all digests match");
                Ok(0)
            } else {
                Ok(1)
            }
        }
        command => {
            let stage = resolve_stage(command, &cfg, &out)?;
            let (path, manifest) = run_stage(stage, &cfg, &out)?;
            for d in &manifest.outputs {
                println!("{}", d.path.display());
            }
            println!("manifest: {}", path.display());
            Ok(0)
        }
    }
}
