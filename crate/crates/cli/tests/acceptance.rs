//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.
//!
//! Set `DAPT_OFFICIAL_DATA` to a directory holding `offenseval/`, `abuseval/`
//! and `hateval/` (each with `train.tsv` and `test.tsv`) to validate the
//! official benchmark files instead of generated stand-ins.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dapt_cli::config::PipelineConfig;
use dapt_cli::stages::{discover_report_inputs, Stage};
use dapt_cli::{reproduce, run_stage};
use dapt_core::corpus::{build_files, read_allowlist, split, CleanDocument, CorpusConfig};
use dapt_core::finetune::{replicate, FinetuneConfig, ReplicateSummary, RunResult};
use dapt_core::gradcheck::check_gradients;
use dapt_core::metrics::{
    confusion, evaluate, format_mean_std, macro_f1, portability, prf, render, ConfusionCounts, EvalReport, InDatasetRow,
    Prediction, ReportSet, TextClassifier,
};
use dapt_core::mlm::{mask_batch, mlm_loss, perplexity, retrain, stream_rng, Checkpoint, Corruption, MaskingConfig, RetrainConfig};
use dapt_core::model::{ClassifierNet, Encoder, EncoderConfig, MlmModel, ParamSet};
use dapt_core::preprocess::{preprocess, EmojiAliasTable, PreprocessMode};
use dapt_core::synthetic::Domain;
use dapt_core::tasks::{load, validate, DatasetSpec, DatasetSplit, Label};
use dapt_core::tokenizer::{is_special, TokenSequence, Vocab, CLS_ID, SEP_ID};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn core_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn own_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn pinned() -> &'static EmojiAliasTable {
    EmojiAliasTable::pinned()
}

// 1 ------------------------------------------------------------------------

fn preprocessing() -> Outcome {
    let ft = |s: &str| preprocess(s, PreprocessMode::Finetuning, pinned());
    ensure!(ft("#kadiricinadalet") == "kadiricinadalet", "hashtag example gave {:?}", ft("#kadiricinadalet"));
    ensure!(ft("\u{1F97A}") == ":pleading_face:", "emoji example gave {:?}", ft("\u{1F97A}"));

    let cases: Vec<(String, String, String)> =
        serde_json::from_str(&std::fs::read_to_string(own_fixture("preprocess_cases.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    ensure!(cases.len() == 30, "rule suite has {} cases", cases.len());
    for (mode, input, want) in &cases {
        let mode = if mode == "R" { PreprocessMode::Retraining } else { PreprocessMode::Finetuning };
        let got = preprocess(input, mode, pinned());
        ensure!(&got == want, "{input:?} ({mode:?}) gave {got:?}, want {want:?}");
    }

    let pieces = [
        "@", "#", "@user", "@@x", "#tag", "http://", "https://a.b/c", "www.", "HTTP://", " ", "  ", "\t", "\n", "\n\n", "word",
        "é", "\u{1F97A}", "\u{1F44D}", "\u{1F3FD}", "\u{200D}", "\u{2764}", "\u{FE0F}", "\u{00A0}", ".", "h", "t", "p", ":", "/",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..1000 {
        let n = rng.random_range(0..24);
        let text: String = (0..n).map(|_| pieces[rng.random_range(0..pieces.len())]).collect();
        for mode in [PreprocessMode::Retraining, PreprocessMode::Finetuning] {
            let once = preprocess(&text, mode, pinned());
            let twice = preprocess(&once, mode, pinned());
            ensure!(once == twice, "fuzz input {i} {text:?} not idempotent in {mode:?}: {once:?} -> {twice:?}");
        }
    }
    Ok("2 reference examples, 30 rule cases, 1000 fuzzed inputs x 2 modes idempotent".into())
}

// 2 ------------------------------------------------------------------------

/// Counts and ratios computed element by element, with F1 as 2tp/(2tp+fp+fn).
fn brute_force(gold: &[bool], pred: &[bool], positive: bool) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fnn) = (0u32, 0u32, 0u32);
    for (&g, &p) in gold.iter().zip(pred) {
        let (g, p) = (g == positive, p == positive);
        if g && p {
            tp += 1;
        }
        if !g && p {
            fp += 1;
        }
        if g && !p {
            fnn += 1;
        }
    }
    let div = |a: u32, b: u32| if b == 0 { 0.0 } else { f64::from(a) / f64::from(b) };
    (div(tp, tp + fp), div(tp, tp + fnn), div(2 * tp, 2 * tp + fp + fnn))
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut degenerate = 0;
    for i in 0..200 {
        let n = rng.random_range(1..=50);
        let (gold, pred): (Vec<bool>, Vec<bool>) = match i % 10 {
            0 => (vec![true; n], vec![true; n]),
            1 => (vec![false; n], vec![false; n]),
            2 => (vec![true; n], vec![false; n]),
            3 => ((0..n).map(|_| rng.random_bool(0.5)).collect(), vec![false; n]),
            4 => (vec![false; n], (0..n).map(|_| rng.random_bool(0.5)).collect()),
            _ => {
                let p = rng.random::<f64>();
                ((0..n).map(|_| rng.random_bool(p)).collect(), (0..n).map(|_| rng.random_bool(p)).collect())
            }
        };
        if gold.iter().all(|&g| g == gold[0]) || pred.iter().all(|&p| p == pred[0]) {
            degenerate += 1;
        }
        let to_label = |v: &[bool]| -> Vec<Label> { v.iter().map(|&b| if b { Label::Positive } else { Label::Negative }).collect() };
        let c = confusion(&to_label(&gold), &to_label(&pred)).map_err(|e| e.to_string())?;
        let mut f1s = [0.0; 2];
        for (k, (class, positive)) in [(Label::Positive, true), (Label::Negative, false)].into_iter().enumerate() {
            let m = prf(&c, class);
            let (p, r, f) = brute_force(&gold, &pred, positive);
            for (a, b) in [(m.precision, p), (m.recall, r), (m.f1, f)] {
                worst = worst.max((a - b).abs());
            }
            f1s[k] = f;
        }
        worst = worst.max((macro_f1(&c) - (f1s[0] + f1s[1]) / 2.0).abs());
    }
    ensure!(worst <= 1e-12, "max deviation {worst:e}");
    Ok(format!("200 vectors ({degenerate} single-class), max deviation {worst:.1e}"))
}

// 3 ------------------------------------------------------------------------

fn corpus_builder() -> Outcome {
    let exp: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(core_fixture("synthetic_dump.expected.json")).unwrap()).unwrap();
    let allow = read_allowlist(&core_fixture("synthetic_dump.allowlist")).map_err(|e| e.to_string())?;
    let cfg = CorpusConfig::new(
        allow,
        exp["window_start"].as_str().unwrap().parse().unwrap(),
        exp["window_end"].as_str().unwrap().parse().unwrap(),
    )
    .map_err(|e| e.to_string())?;
    let pre = |t: &str| preprocess(t, PreprocessMode::Retraining, pinned());
    let dump = [core_fixture("synthetic_dump.jsonl")];
    let built = build_files(&dump, &cfg, pre, 1).map_err(|e| e.to_string())?;
    let report = serde_json::to_value(&built.report).unwrap();
    for key in ["total_lines", "accepted", "skipped", "rejected"] {
        ensure!(report[key] == exp[key], "{key}: {} != expected {}", report[key], exp[key]);
    }
    let per: BTreeMap<String, usize> = serde_json::from_value(exp["per_community"].clone()).unwrap();
    ensure!(built.corpus.stats() == &per, "per-community {:?} != {per:?}", built.corpus.stats());
    let want: Vec<CleanDocument> = std::fs::read_to_string(core_fixture("synthetic_dump.expected_corpus.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    ensure!(built.corpus.documents() == want.as_slice(), "accepted documents differ from the expected corpus");

    let bytes = |workers: usize| -> Result<Vec<u8>, String> {
        let b = build_files(&dump, &cfg, pre, workers).map_err(|e| e.to_string())?;
        let mut out = Vec::new();
        b.corpus.write_jsonl(&mut out).map_err(|e| e.to_string())?;
        Ok(out)
    };
    let reference = bytes(1)?;
    ensure!(bytes(1)? == reference, "two single-worker runs differ");
    for w in [2, 4, 8] {
        ensure!(bytes(w)? == reference, "{w} workers differ from 1 worker");
    }

    let n = built.corpus.len();
    let held = (n as f64 * exp["heldout_fraction"].as_f64().unwrap()).round() as usize;
    let a = split(&built.corpus, held, 42).map_err(|e| e.to_string())?;
    let b = split(&built.corpus, held, 42).map_err(|e| e.to_string())?;
    ensure!(a == b, "seeded split is not repeatable");
    ensure!(a.heldout.len() == held && a.train.len() == n - held, "split sizes {}/{}", a.train.len(), a.heldout.len());
    let mut merged: Vec<&CleanDocument> = a.train.documents().iter().chain(a.heldout.documents()).collect();
    let mut all: Vec<&CleanDocument> = built.corpus.documents().iter().collect();
    let key = |d: &&CleanDocument| (d.created_utc, d.text.clone(), d.community.clone());
    merged.sort_by_key(key);
    all.sort_by_key(key);
    ensure!(merged == all, "split is not a partition of the corpus");
    Ok(format!(
        "{} lines, {} accepted, {:?}, byte-identical at 1/2/4/8 workers, split {}/{}",
        exp["total_lines"], n, per, a.train.len(), a.heldout.len()
    ))
}

// 4 ------------------------------------------------------------------------

fn masking_statistics() -> Outcome {
    let vocab_size = 500;
    let mut rng = stream_rng(3, 0);
    let mut batch = Vec::new();
    let mut regular = 0usize;
    while regular < 200_000 {
        let len = rng.random_range(1..60);
        let mut ids = vec![CLS_ID];
        for _ in 0..len {
            // Sprinkle special ids inside sequences too, as padding would.
            let id = if rng.random_bool(0.05) { rng.random_range(0..5) } else { rng.random_range(5..vocab_size as u32) };
            ids.push(id);
        }
        ids.push(SEP_ID);
        regular += ids.iter().filter(|&&id| !is_special(id)).count();
        batch.push(TokenSequence { ids });
    }
    let cfg = MaskingConfig::default();
    ensure!((cfg.mask_prob - 0.15).abs() < 1e-12, "default mask_prob is {}", cfg.mask_prob);
    let mb = mask_batch(&batch, vocab_size, &cfg, &mut stream_rng(3, 1));
    let mut special_hits = 0;
    let mut kinds = [0usize; 3];
    for (seq, (positions, corruption)) in batch.iter().zip(mb.masked_positions.iter().zip(&mb.corruption)) {
        for (&p, kind) in positions.iter().zip(corruption) {
            if is_special(seq.ids[p]) {
                special_hits += 1;
            }
            kinds[match kind {
                Corruption::Mask => 0,
                Corruption::Random => 1,
                Corruption::Keep => 2,
            }] += 1;
        }
    }
    let selected = mb.labeled_count();
    let frac = selected as f64 / regular as f64;
    let shares: Vec<f64> = kinds.iter().map(|&k| k as f64 / selected as f64).collect();
    ensure!(special_hits == 0, "{special_hits} special positions masked");
    ensure!((0.13..=0.17).contains(&frac), "masked fraction {frac:.4}");
    for (share, target) in shares.iter().zip([0.8, 0.1, 0.1]) {
        ensure!((share - target).abs() <= 0.03, "corruption shares {shares:?}");
    }
    Ok(format!(
        "{regular} positions, masked {frac:.4}, mask/random/keep {:.3}/{:.3}/{:.3}, 0 specials",
        shares[0], shares[1], shares[2]
    ))
}

// 5 ------------------------------------------------------------------------

fn tiny_config(vocab_size: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size,
        hidden: 8,
        layers: 2,
        heads: 2,
        intermediate: 12,
        max_positions: 8,
        layer_norm_eps: 1e-5,
    }
}

fn mlm_analytics() -> Outcome {
    let mut worst_uniform = 0.0f64;
    for v in [9usize, 100, 2000, 30_522] {
        let seq = TokenSequence { ids: vec![CLS_ID, 5, 6, 7, 8, SEP_ID] };
        let cfg = MaskingConfig { mask_prob: 1.0, ..Default::default() };
        let mb = mask_batch(&[seq], v, &cfg, &mut stream_rng(1, 1));
        let loss = mlm_loss(&[Array2::from_elem((6, v), -1.25)], &mb).map_err(|e| e.to_string())?;
        ensure!(loss.labeled == 4, "{} labeled positions", loss.labeled);
        worst_uniform = worst_uniform.max((loss.value - (v as f64).ln()).abs());
    }
    ensure!(worst_uniform <= 1e-9, "uniform-logit loss off by {worst_uniform:e}");

    const IDS: [u32; 7] = [CLS_ID, 7, 12, 5, 9, 7, SEP_ID];
    let mut model = MlmModel::init(tiny_config(16), &mut stream_rng(5, 0)).map_err(|e| e.to_string())?;
    model.scale(5.0);
    let n_params = model.num_params();
    ensure!(n_params <= 5_000, "{n_params} parameters");
    let targets = [(1usize, 7u32), (3, 5), (4, 11)];
    let mut grad = model.zeros_like();
    model.accumulate_gradient(&IDS, &targets, &mut grad).map_err(|e| e.to_string())?;
    let loss = |m: &MlmModel| {
        let mut scratch = m.zeros_like();
        m.accumulate_gradient(&IDS, &targets, &mut scratch).unwrap().total
    };
    let mlm = check_gradients(&model, &grad, loss, 1e-5, 1e-6);
    ensure!(mlm.max_relative_error <= 1e-4, "MLM gradient: {mlm:?}");

    let encoder = Encoder::init(tiny_config(16), &mut stream_rng(6, 0)).map_err(|e| e.to_string())?;
    let mut net = ClassifierNet::new(encoder, &mut stream_rng(6, 1));
    net.scale(5.0);
    let mut cls_worst = 0.0f64;
    for class in [0, 1] {
        let mut grad = net.zeros_like();
        net.accumulate_gradient(&IDS, class, &mut grad).map_err(|e| e.to_string())?;
        let loss = |n: &ClassifierNet| {
            let mut scratch = n.zeros_like();
            n.accumulate_gradient(&IDS, class, &mut scratch).unwrap()
        };
        let r = check_gradients(&net, &grad, loss, 1e-5, 1e-6);
        ensure!(r.max_relative_error <= 1e-4, "classifier gradient (class {class}): {r:?}");
        cls_worst = cls_worst.max(r.max_relative_error);
    }
    Ok(format!(
        "|loss - ln V| <= {worst_uniform:.1e}; {n_params}-parameter MLM max rel. error {:.1e}, classifier {cls_worst:.1e}",
        mlm.max_relative_error
    ))
}

// 6 and 7 ------------------------------------------------------------------

struct Desk {
    vocab: Vocab,
    base: Checkpoint,
    adapted_a: Checkpoint,
    heldout_a: dapt_core::corpus::Corpus,
    retrain_time: Duration,
}

const DESK_MAX_LEN: usize = 32;

fn desk_retrain_config() -> RetrainConfig {
    RetrainConfig {
        epochs: 20,
        batch_size: 32,
        max_len: DESK_MAX_LEN,
        learning_rate: 1e-3,
        seed: 11,
        ..Default::default()
    }
}

fn desk_setup() -> Result<Desk, String> {
    let (a, b) = (Domain::a(), Domain::b());
    let corpus_a = a.corpus(2000, 1);
    let corpus_b = b.corpus(2000, 2);
    let heldout_a = a.corpus(300, 3);
    let vocab = Vocab::train(corpus_a.texts().chain(corpus_b.texts()), 200, true).map_err(|e| e.to_string())?;
    let base = Checkpoint::init(EncoderConfig::desk(vocab.len()), vocab.clone(), 7).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let adapted_a = retrain(&base, &corpus_a, &desk_retrain_config(), &MaskingConfig::default()).map_err(|e| e.to_string())?;
    Ok(Desk {
        vocab,
        base,
        adapted_a,
        heldout_a,
        retrain_time: start.elapsed(),
    })
}

fn heldout_perplexity(ck: &Checkpoint, desk: &Desk) -> Result<f64, String> {
    perplexity(&ck.model, &desk.vocab, &desk.heldout_a, &MaskingConfig::default(), 99, DESK_MAX_LEN).map_err(|e| e.to_string())
}

fn desk_retraining(desk: &Desk) -> Outcome {
    let cfg = &desk.base.model.encoder.config;
    ensure!(cfg.layers == 2 && cfg.hidden == 64 && desk.vocab.len() <= 2000, "encoder shape {cfg:?}");
    let h = &desk.adapted_a.history;
    ensure!(h.len() == 20, "{} epochs recorded", h.len());
    let (first, last) = (h[0].mean_loss, h[h.len() - 1].mean_loss);
    let before = heldout_perplexity(&desk.base, desk)?;
    let after = heldout_perplexity(&desk.adapted_a, desk)?;
    ensure!(last <= 0.5 * first, "final loss {last:.3} > half of first {first:.3}");
    ensure!(after < before, "held-out perplexity {after:.2} not below {before:.2}");
    ensure!(desk.retrain_time < Duration::from_secs(600), "retraining took {:?}", desk.retrain_time);
    Ok(format!(
        "vocab {}, loss {first:.3} -> {last:.3} ({:.0}%), held-out perplexity {before:.1} -> {after:.2}, retraining {:.1}s",
        desk.vocab.len(),
        100.0 * last / first,
        desk.retrain_time.as_secs_f64()
    ))
}

fn domain_adaptation(desk: &Desk) -> Outcome {
    let corpus_b = Domain::b().corpus(2000, 2);
    let adapted_b = retrain(&desk.base, &corpus_b, &desk_retrain_config(), &MaskingConfig::default()).map_err(|e| e.to_string())?;
    let ppl_a = heldout_perplexity(&desk.adapted_a, desk)?;
    let ppl_b = heldout_perplexity(&adapted_b, desk)?;
    ensure!(ppl_a < ppl_b, "A-heldout perplexity: A-adapted {ppl_a:.2} vs B-adapted {ppl_b:.2}");

    let task = Domain::a().polarity_task(400, 200, 5);
    let cfg = FinetuneConfig {
        learning_rate: 1e-4,
        epochs: 5,
        batch_size: 16,
        max_len: DESK_MAX_LEN,
        ..Default::default()
    };
    let seeds = [1, 2, 3, 4, 5];
    let adapted = replicate(&desk.adapted_a, "adapted-A", &task, &cfg, &seeds).map_err(|e| e.to_string())?;
    let baseline = replicate(&desk.base, "baseline", &task, &cfg, &seeds).map_err(|e| e.to_string())?;
    ensure!(
        adapted.macro_f1.mean >= baseline.macro_f1.mean,
        "macro-F1 adapted {} < baseline {}",
        format_mean_std(&adapted.macro_f1),
        format_mean_std(&baseline.macro_f1)
    );
    let best = adapted.runs.iter().map(|r| r.report.macro_f1).fold(f64::MIN, f64::max);
    ensure!(adapted.best_run().report.macro_f1 == best, "selected run is not the best stored run");
    Ok(format!(
        "A-heldout perplexity A {ppl_a:.2} < B {ppl_b:.1}; 5-seed macro-F1 adapted {} >= baseline {}",
        format_mean_std(&adapted.macro_f1),
        format_mean_std(&baseline.macro_f1)
    ))
}

// 8 ------------------------------------------------------------------------

fn replicate_aggregation() -> Outcome {
    let scores = [0.80, 0.81, 0.79, 0.80, 0.80];
    let counts = ConfusionCounts { tp: 1, fp: 0, fn_: 0, tn: 1 };
    let runs: Vec<RunResult> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let mut report = EvalReport::from_counts("m", "d", counts);
            report.macro_f1 = s;
            RunResult { seed: i as u64 + 1, report }
        })
        .collect();
    let summary = ReplicateSummary::from_runs("d", "m", FinetuneConfig::default(), runs, Vec::new()).map_err(|e| e.to_string())?;
    let m = summary.macro_f1;
    // Squared deviations from .80 are 0, 1e-4, 1e-4, 0, 0; divide by n.
    let want_std = (2e-4f64 / 5.0).sqrt();
    ensure!((m.mean - 0.800).abs() < 1e-4, "mean {}", m.mean);
    ensure!((m.std - want_std).abs() < 1e-4 && (m.std - 0.0063).abs() < 1e-4, "std {}", m.std);
    let shown = format_mean_std(&m);
    ensure!(shown == ".800±.006", "rendered {shown:?}");
    let set = ReportSet {
        in_dataset: vec![InDatasetRow {
            dataset: "d".into(),
            model: "m".into(),
            runs: 5,
            macro_f1: m,
            positive_f1: summary.positive_f1,
        }],
        ..Default::default()
    };
    let doc = render(&set).map_err(|e| e.to_string())?;
    ensure!(doc.text.contains(".800±.006"), "table lacks .800±.006:\n{}", doc.text);
    Ok(format!("mean {:.4}, population std {:.5}, rendered {shown}", m.mean, m.std))
}

// 9 ------------------------------------------------------------------------

struct ConstantNegative;

impl TextClassifier for ConstantNegative {
    fn predict(&self, texts: &[&str]) -> dapt_core::Result<Vec<Prediction>> {
        Ok(texts.iter().map(|_| Prediction { label: Label::Negative, positive_score: 0.0 }).collect())
    }
}

/// Flags texts containing any of its cue words.
struct Keywords(Vec<&'static str>);

impl TextClassifier for Keywords {
    fn predict(&self, texts: &[&str]) -> dapt_core::Result<Vec<Prediction>> {
        Ok(texts
            .iter()
            .map(|t| {
                let hit = t.split_whitespace().any(|w| self.0.contains(&w));
                Prediction {
                    label: if hit { Label::Positive } else { Label::Negative },
                    positive_score: if hit { 1.0 } else { 0.0 },
                }
            })
            .collect())
    }
}

fn fixture_specs() -> Vec<DatasetSpec> {
    let root = core_fixture("datasets");
    let text = std::fs::read_to_string(root.join("fixtures.toml")).unwrap();
    DatasetSpec::parse_many(&text).unwrap().iter().map(|s| s.resolved(&root)).collect()
}

fn portability_harness() -> Outcome {
    let names = ["offenseval", "abuseval", "hateval"];
    let specs = fixture_specs();
    let splits: Vec<DatasetSplit> = names
        .iter()
        .map(|n| load(specs.iter().find(|s| s.name == *n).unwrap(), pinned()).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    let split_refs: Vec<(&str, &DatasetSplit)> = names.iter().copied().zip(&splits).collect();
    let keyword_models = [Keywords(vec!["grimbo", "snarle"]), Keywords(vec!["vexit"]), Keywords(vec!["grimbo", "snarle", "vexit", "brakka"])];
    let models: Vec<(&str, &Keywords)> = names.iter().copied().zip(&keyword_models).collect();
    let grid = portability("keywords", &models, &split_refs).map_err(|e| e.to_string())?;
    ensure!(grid.cells.len() == 9, "{} cells", grid.cells.len());
    let off = grid.off_diagonal().count();
    ensure!(off == 6, "{off} off-diagonal cells");
    let doc = render(&ReportSet { portability: vec![grid.clone()], ..Default::default() }).map_err(|e| e.to_string())?;
    ensure!(doc.text.contains("precision / recall"), "no P/R grid in:\n{}", doc.text);
    for n in names {
        ensure!(doc.text.contains(n), "rendered grid lacks {n}");
    }

    let constant = [ConstantNegative, ConstantNegative, ConstantNegative];
    let cmodels: Vec<(&str, &ConstantNegative)> = names.iter().copied().zip(&constant).collect();
    let cgrid = portability("constant", &cmodels, &split_refs).map_err(|e| e.to_string())?;
    ensure!(cgrid.cells.iter().all(|c| c.report.positive.recall == 0.0), "constant-negative recall not 0");
    let direct = evaluate(&ConstantNegative, "constant", "offenseval", &splits[0].test).map_err(|e| e.to_string())?;
    ensure!(direct.positive.recall == 0.0, "direct recall {}", direct.positive.recall);
    let sample = grid.cell("offenseval", "hateval").unwrap();
    Ok(format!(
        "9 cells, 6 off-diagonal, P/R grid rendered (e.g. offenseval->hateval P {:.3} R {:.3}); constant-negative recall 0 in all 9",
        sample.report.positive.precision, sample.report.positive.recall
    ))
}

// 10 -----------------------------------------------------------------------

/// Writes files in the official column layouts with exactly the official
/// counts, for use when the real files are not available.
fn write_official_size(root: &Path) -> std::io::Result<()> {
    let layouts: [(&str, &str, [&str; 2], usize, usize, usize, usize); 3] = [
        ("offenseval", "id\ttweet\tsubtask_a\tsubtask_b\tsubtask_c", ["OFF\tUNT\tNULL", "NOT\tNULL\tNULL"], 13_240, 860, 4_400, 240),
        ("abuseval", "id\ttweet\tabuse", ["EXP", "NOTABU"], 13_240, 860, 2_749, 178),
        ("hateval", "id\ttext\tHS\tTR\tAG", ["1\t0\t0", "0\t0\t0"], 10_000, 3_000, 4_165, 1_252),
    ];
    let mut next_id = 0usize;
    for (name, header, [pos, neg], n_train, n_test, p_train, p_test) in layouts {
        std::fs::create_dir_all(root.join(name))?;
        for (file, n, p) in [("train.tsv", n_train, p_train), ("test.tsv", n_test, p_test)] {
            let mut text = format!("{header}\n");
            for i in 0..n {
                next_id += 1;
                let label = if i < p { pos } else { neg };
                let _ = writeln!(text, "{next_id}\t@USER message number {i} of {file}\t{label}");
            }
            std::fs::write(root.join(name).join(file), text)?;
        }
    }
    Ok(())
}

fn dataset_validation() -> Outcome {
    let (root, source, _guard) = match std::env::var_os("DAPT_OFFICIAL_DATA") {
        Some(dir) => (PathBuf::from(dir), "official files", None),
        None => {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            write_official_size(dir.path()).map_err(|e| e.to_string())?;
            (dir.path().to_path_buf(), "generated official-size files (DAPT_OFFICIAL_DATA unset)", Some(dir))
        }
    };
    let mut summary = Vec::new();
    for spec in DatasetSpec::bundled() {
        let spec = spec.resolved(&root);
        let split = load(&spec, pinned()).map_err(|e| format!("{}: {e}", spec.name))?;
        let report = validate(&split);
        ensure!(report.passed(), "{}: {:?}", spec.name, report.failures().collect::<Vec<_>>());
        let count = |v: &[dapt_core::tasks::LabeledExample]| v.iter().filter(|e| e.label == Label::Positive).count();
        summary.push(format!(
            "{} {}/{} ({}/{})",
            spec.name,
            split.train.len(),
            split.test.len(),
            count(&split.train),
            count(&split.test)
        ));
    }

    let perturbed: Vec<DatasetSpec> = fixture_specs().into_iter().filter(|s| s.train.to_string_lossy().contains("perturbed-")).collect();
    ensure!(perturbed.len() == 7, "{} perturbed fixtures", perturbed.len());
    for spec in &perturbed {
        let flagged = match load(spec, pinned()) {
            Err(_) => true,
            Ok(split) => !validate(&split).passed(),
        };
        ensure!(flagged, "{} not flagged", spec.train.display());
    }
    Ok(format!("{source}: {}; 7/7 perturbations flagged", summary.join(", ")))
}

// 11 -----------------------------------------------------------------------

fn desk_pipeline_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = 7;
    cfg.corpus.window_start = "2013-03".parse().unwrap();
    cfg.corpus.window_end = "2014-08".parse().unwrap();
    cfg.corpus.heldout_size = 28;
    cfg.corpus.workers = 3;
    cfg.tokenizer.vocab_size = 100;
    cfg.model.hidden = 16;
    cfg.model.layers = 1;
    cfg.model.heads = 2;
    cfg.model.intermediate = 32;
    cfg.model.max_positions = 32;
    cfg.retrain.epochs = 2;
    cfg.retrain.batch_size = 16;
    cfg.retrain.max_len = 32;
    cfg.retrain.learning_rate = 1e-3;
    cfg.finetune.learning_rate = 1e-3;
    cfg.finetune.epochs = 2;
    cfg.finetune.batch_size = 8;
    cfg.finetune.max_len = 32;
    cfg.finetune.seeds = vec![1, 2];
    cfg.datasets.root = core_fixture("datasets");
    cfg.datasets.spec_file = Some(core_fixture("datasets/fixtures.toml"));
    cfg
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("run");
    let mut cfg = desk_pipeline_config();
    let run = |stage: Stage, cfg: &PipelineConfig| run_stage(stage, cfg, &out).map(|(p, _)| p).map_err(|e| format!("{e:#}"));
    let mut manifests = vec![run(
        Stage::BuildCorpus {
            dumps: vec![core_fixture("synthetic_dump.jsonl")],
            allowlist: Some(core_fixture("synthetic_dump.allowlist")),
        },
        &cfg,
    )?];
    manifests.push(run(Stage::TrainVocab { corpus: out.join("corpus/train.jsonl") }, &cfg)?);
    let pretrain = |from: Option<PathBuf>, name: &str| Stage::Pretrain {
        corpus: out.join("corpus/train.jsonl"),
        heldout: Some(out.join("corpus/heldout.jsonl")),
        vocab: out.join("vocab/vocab.txt"),
        from,
        name: name.into(),
    };
    let mut init_cfg = cfg.clone();
    init_cfg.retrain.epochs = 0;
    manifests.push(run(pretrain(None, "base"), &init_cfg)?);
    manifests.push(run(pretrain(Some(out.join("checkpoints/base")), "adapted"), &cfg)?);
    for model in ["base", "adapted"] {
        manifests.push(run(
            Stage::Finetune {
                checkpoint: out.join("checkpoints").join(model),
                model_name: model.into(),
                datasets: cfg.evaluation.datasets.clone(),
            },
            &cfg,
        )?);
        manifests.push(run(
            Stage::Portability {
                model_name: model.into(),
                finetune_dir: out.join("finetune").join(model),
            },
            &cfg,
        )?);
    }
    manifests.push(run(
        Stage::Evaluate {
            classifier: out.join("finetune/adapted/hateval/seed-1"),
            model_name: "adapted".into(),
            dataset: "hateval".into(),
        },
        &cfg,
    )?);
    let inputs = discover_report_inputs(&out).map_err(|e| e.to_string())?;
    manifests.push(run(Stage::Report { inputs }, &cfg)?);

    let mut mismatches = 0;
    let mut outputs = 0;
    for m in &manifests {
        let r = reproduce(m).map_err(|e| format!("{e:#}"))?;
        mismatches += r.input_mismatches.len() + r.output_mismatches.len();
        ensure!(r.clean(), "{}: {:?} {:?}", m.display(), r.input_mismatches, r.output_mismatches);
        outputs += dapt_cli::manifest::RunManifest::load(m).map_err(|e| e.to_string())?.outputs.len();
    }

    // The check must also be able to fail: a different seed changes the corpus split.
    cfg.seed = 8;
    let other = dir.path().join("other");
    let (m, _) = run_stage(
        Stage::BuildCorpus {
            dumps: vec![core_fixture("synthetic_dump.jsonl")],
            allowlist: Some(core_fixture("synthetic_dump.allowlist")),
        },
        &cfg,
        &other,
    )
    .map_err(|e| e.to_string())?;
    let mut tampered = dapt_cli::manifest::RunManifest::load(&m).map_err(|e| e.to_string())?;
    tampered.config.seed = 7;
    let path = dir.path().join("tampered.json");
    std::fs::write(&path, serde_json::to_string(&tampered).unwrap()).unwrap();
    let r = reproduce(&path).map_err(|e| e.to_string())?;
    ensure!(!r.output_mismatches.is_empty(), "a changed seed went unnoticed");
    Ok(format!("{} stages, {outputs} output digests, {mismatches} mismatches", manifests.len()))
}

// --------------------------------------------------------------------------

fn main() {
    let started = Instant::now();
    let mut failures = 0;
    let mut report = |id: usize, name: &str, limit: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let elapsed = t.elapsed();
        let result = match (result, limit) {
            (Ok(_), Some(l)) if elapsed > l => Err(format!("took {elapsed:?}, limit {l:?}")),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail} [{:.2}s]", elapsed.as_secs_f64()),
            Err(why) => {
                failures += 1;
                println!("FAIL {id:>2} {name}: {why} [{:.2}s]", elapsed.as_secs_f64());
            }
        }
    };
    let five = Some(Duration::from_secs(5));
    report(1, "preprocessing conformance", five, &mut preprocessing);
    report(2, "metric oracle equivalence", five, &mut metrics_oracle);
    report(3, "corpus builder on synthetic dump", None, &mut corpus_builder);
    report(4, "masking statistics", None, &mut masking_statistics);
    report(5, "MLM loss analytics", None, &mut mlm_analytics);
    let desk = desk_setup();
    report(6, "desk-scale retraining", Some(Duration::from_secs(600)), &mut || {
        desk.as_ref().map_err(Clone::clone).and_then(desk_retraining)
    });
    report(7, "domain-adaptation property", None, &mut || desk.as_ref().map_err(Clone::clone).and_then(domain_adaptation));
    report(8, "replicate aggregation", None, &mut replicate_aggregation);
    report(9, "portability harness", None, &mut portability_harness);
    report(10, "dataset validation", None, &mut dataset_validation);
    report(11, "end-to-end determinism", None, &mut end_to_end);
    println!("{} of 11 criteria passed in {:.1}s", 11 - failures, started.elapsed().as_secs_f64());
    if failures > 0 {
        std::process::exit(1);
    }
}
