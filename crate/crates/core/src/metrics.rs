//! Confusion counts, per-class precision/recall/F1, macro-F1, the
//! cross-dataset portability grid and report rendering.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::{DatasetSplit, Label, LabeledExample};

pub const REPORT_SCHEMA: &str = "dapt-report-v1";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Counts with the negative class taken as reference.
    pub fn swapped(&self) -> Self {
        ConfusionCounts {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

/// Counts with the positive class as reference.
pub fn confusion(gold: &[Label], pred: &[Label]) -> Result<ConfusionCounts> {
    if gold.len() != pred.len() {
        return Err(Error::invalid(format!(
            "{} gold labels vs {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::invalid("cannot score an empty prediction set"));
    }
    let mut c = ConfusionCounts::default();
    for (g, p) in gold.iter().zip(pred) {
        match (g, p) {
            (Label::Positive, Label::Positive) => c.tp += 1,
            (Label::Negative, Label::Positive) => c.fp += 1,
            (Label::Positive, Label::Negative) => c.fn_ += 1,
            (Label::Negative, Label::Negative) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// A 0/0 ratio was replaced by 0.
    pub zero_division: bool,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn prf(c: &ConfusionCounts, class: Label) -> ClassMetrics {
    let c = match class {
        Label::Positive => *c,
        Label::Negative => c.swapped(),
    };
    let (precision, zp) = ratio(c.tp, c.tp + c.fp);
    let (recall, zr) = ratio(c.tp, c.tp + c.fn_);
    let (f1, zf) = if precision + recall == 0.0 {
        (0.0, true)
    } else {
        (2.0 * precision * recall / (precision + recall), false)
    };
    ClassMetrics {
        precision,
        recall,
        f1,
        zero_division: zp || zr || zf,
    }
}

pub fn macro_f1(c: &ConfusionCounts) -> f64 {
    (prf(c, Label::Positive).f1 + prf(c, Label::Negative).f1) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub dataset: String,
    pub counts: ConfusionCounts,
    pub positive: ClassMetrics,
    pub negative: ClassMetrics,
    pub macro_f1: f64,
}

impl EvalReport {
    pub fn from_counts(model: &str, dataset: &str, counts: ConfusionCounts) -> Self {
        let positive = prf(&counts, Label::Positive);
        let negative = prf(&counts, Label::Negative);
        EvalReport {
            model: model.to_string(),
            dataset: dataset.to_string(),
            counts,
            macro_f1: (positive.f1 + negative.f1) / 2.0,
            positive,
            negative,
        }
    }

    pub fn zero_division(&self) -> bool {
        self.positive.zero_division || self.negative.zero_division
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    pub positive_score: f64,
}

/// Anything that assigns binary labels to normalized texts.
pub trait TextClassifier {
    fn predict(&self, texts: &[&str]) -> Result<Vec<Prediction>>;
}

pub fn evaluate<C: TextClassifier + ?Sized>(model: &C, model_name: &str, dataset: &str, examples: &[LabeledExample]) -> Result<EvalReport> {
    let texts: Vec<&str> = examples.iter().map(|e| e.text.as_str()).collect();
    let preds = model.predict(&texts)?;
    let gold: Vec<Label> = examples.iter().map(|e| e.label).collect();
    let pred: Vec<Label> = preds.iter().map(|p| p.label).collect();
    Ok(EvalReport::from_counts(model_name, dataset, confusion(&gold, &pred)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortabilityCell {
    pub train: String,
    pub test: String,
    pub report: EvalReport,
}

/// Train dataset × test dataset grid; cells in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortabilityMatrix {
    pub model: String,
    pub datasets: Vec<String>,
    pub cells: Vec<PortabilityCell>,
}

impl PortabilityMatrix {
    pub fn cell(&self, train: &str, test: &str) -> Option<&PortabilityCell> {
        self.cells.iter().find(|c| c.train == train && c.test == test)
    }

    pub fn off_diagonal(&self) -> impl Iterator<Item = &PortabilityCell> {
        self.cells.iter().filter(|c| c.train != c.test)
    }
}

/// Evaluates every model on every dataset's test split. Dataset order
/// follows `models`.
pub fn portability<C: TextClassifier + ?Sized>(model_name: &str, models: &[(&str, &C)], splits: &[(&str, &DatasetSplit)]) -> Result<PortabilityMatrix> {
    let model_keys: BTreeSet<&str> = models.iter().map(|(k, _)| *k).collect();
    let split_keys: BTreeSet<&str> = splits.iter().map(|(k, _)| *k).collect();
    if let Some(missing) = model_keys.symmetric_difference(&split_keys).next() {
        let side = if model_keys.contains(missing) { "test split" } else { "trained model" };
        return Err(Error::Dataset {
            dataset: missing.to_string(),
            detail: format!("no {side} supplied for portability grid"),
        });
    }
    let mut cells = Vec::with_capacity(models.len() * splits.len());
    for (train, model) in models {
        for (test, _) in models {
            let split = splits.iter().find(|(k, _)| k == test).map(|(_, s)| *s).unwrap();
            let report = evaluate(*model, model_name, test, &split.test)?;
            cells.push(PortabilityCell {
                train: train.to_string(),
                test: test.to_string(),
                report,
            });
        }
    }
    Ok(PortabilityMatrix {
        model: model_name.to_string(),
        datasets: models.iter().map(|(k, _)| k.to_string()).collect(),
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation (divides by n).
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

/// `.765` style: three decimals, no leading zero below 1.
pub fn format_score(x: f64) -> String {
    let s = format!("{x:.3}");
    match s.strip_prefix("0.") {
        Some(rest) => format!(".{rest}"),
        None => s,
    }
}

pub fn format_mean_std(m: &MeanStd) -> String {
    format!("{}±{}", format_score(m.mean), format_score(m.std))
}

/// One in-dataset row: replicate summary of a model on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InDatasetRow {
    pub dataset: String,
    pub model: String,
    pub runs: usize,
    pub macro_f1: MeanStd,
    pub positive_f1: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSet {
    pub schema: String,
    pub std_kind: String,
    pub in_dataset: Vec<InDatasetRow>,
    pub portability: Vec<PortabilityMatrix>,
}

impl Default for ReportSet {
    fn default() -> Self {
        ReportSet {
            schema: REPORT_SCHEMA.to_string(),
            std_kind: "population".to_string(),
            in_dataset: Vec::new(),
            portability: Vec::new(),
        }
    }
}

impl ReportSet {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: ReportSet = serde_json::from_str(text)?;
        if set.schema != REPORT_SCHEMA {
            return Err(Error::format("report", format!("unsupported schema {}", set.schema)));
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportDocument {
    pub text: String,
    pub json: String,
}

fn grid_datasets(set: &ReportSet) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for m in &set.portability {
        for d in &m.datasets {
            if !out.contains(d) {
                out.push(d.clone());
            }
        }
    }
    out
}

fn pad(s: &str, w: usize) -> String {
    format!("{s:<w$}")
}

fn render_in_dataset(set: &ReportSet, out: &mut String) {
    out.push_str(&format!("In-dataset results (mean±std over runs, {} std)\n", set.std_kind));
    out.push_str(&format!("{}{}{}{}\n", pad("Dataset", 16), pad("Model", 16), pad("Macro F1", 14), "Pos. class - F1"));
    if set.in_dataset.is_empty() {
        out.push_str("(no runs)\n");
        return;
    }
    for row in &set.in_dataset {
        let _ = writeln!(
            out,
            "{}{}{}{}",
            pad(&row.dataset, 16),
            pad(&row.model, 16),
            pad(&format_mean_std(&row.macro_f1), 14),
            format_mean_std(&row.positive_f1)
        );
    }
}

fn render_grid(set: &ReportSet, out: &mut String, positive_pr: bool) {
    let datasets = grid_datasets(set);
    if positive_pr {
        out.push_str("Portability: positive-class precision / recall (rows train, columns test)\n");
    } else {
        out.push_str("Portability: macro F1 (rows train, columns test)\n");
    }
    let mut header = format!("{}{}", pad("Train", 16), pad("Model", 16));
    for d in &datasets {
        let cell = if positive_pr { format!("{d} P/R") } else { d.clone() };
        header.push_str(&pad(&cell, 16));
    }
    out.push_str(header.trim_end());
    out.push('\n');
    if set.portability.is_empty() {
        out.push_str("(no runs)\n");
        return;
    }
    for train in &datasets {
        for m in &set.portability {
            if !m.datasets.contains(train) {
                continue;
            }
            let mut line = format!("{}{}", pad(train, 16), pad(&m.model, 16));
            for test in &datasets {
                let text = match m.cell(train, test) {
                    _ if train == test => "--".to_string(),
                    Some(c) if positive_pr => format!(
                        "{} {}",
                        format_score(c.report.positive.precision),
                        format_score(c.report.positive.recall)
                    ),
                    Some(c) => format_score(c.report.macro_f1),
                    None => "n/a".to_string(),
                };
                line.push_str(&pad(&text, 16));
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
    }
}

/// Human-readable tables plus the structured export.
pub fn render(set: &ReportSet) -> Result<ReportDocument> {
    let mut text = String::new();
    render_in_dataset(set, &mut text);
    text.push('\n');
    render_grid(set, &mut text, false);
    text.push('\n');
    render_grid(set, &mut text, true);
    let flagged: Vec<String> = set
        .portability
        .iter()
        .flat_map(|m| m.cells.iter())
        .filter(|c| c.report.zero_division())
        .map(|c| format!("{} {}→{}", c.report.model, c.train, c.test))
        .collect();
    if !flagged.is_empty() {
        let _ = writeln!(text, "\nNote: 0/0 metric values set to 0 in: {}", flagged.join(", "));
    }
    Ok(ReportDocument {
        text,
        json: set.to_json()?,
    })
}
