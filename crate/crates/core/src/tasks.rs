//! Binary-labeled benchmark datasets: loading, label mapping and count validation.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{preprocess, EmojiAliasTable, PreprocessMode};

const BUNDLED_SPECS: &str = include_str!("../data/datasets.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub text: String,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedCounts {
    pub train: usize,
    pub test: usize,
    pub train_positive: usize,
    pub test_positive: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    pub id_column: String,
    pub text_column: String,
    pub label_column: String,
    /// Raw label values mapped to the positive class.
    pub positive: Vec<String>,
    /// Raw label values mapped to the negative class.
    pub negative: Vec<String>,
    #[serde(default)]
    pub expected: Option<ExpectedCounts>,
}

fn default_delimiter() -> char {
    '\t'
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    dataset: Vec<DatasetSpec>,
}

impl DatasetSpec {
    /// Parses a TOML file holding `[[dataset]]` tables.
    pub fn parse_many(text: &str) -> Result<Vec<DatasetSpec>> {
        let file: SpecFile = toml::from_str(text).map_err(|e| Error::format("dataset layout file", e.to_string()))?;
        for spec in &file.dataset {
            spec.check()?;
        }
        Ok(file.dataset)
    }

    /// The three official layouts with their official split sizes.
    pub fn bundled() -> Vec<DatasetSpec> {
        DatasetSpec::parse_many(BUNDLED_SPECS).expect("bundled dataset specs are valid")
    }

    fn check(&self) -> Result<()> {
        let overlap = self.positive.iter().find(|p| self.negative.contains(p));
        if let Some(label) = overlap {
            return Err(Error::Dataset {
                dataset: self.name.clone(),
                detail: format!("raw label {label:?} mapped to both classes"),
            });
        }
        if self.positive.is_empty() || self.negative.is_empty() {
            return Err(Error::Dataset {
                dataset: self.name.clone(),
                detail: "label mapping must name positive and negative raw labels".into(),
            });
        }
        Ok(())
    }

    /// Makes relative file paths relative to `root`.
    pub fn resolved(&self, root: &Path) -> DatasetSpec {
        let mut spec = self.clone();
        if spec.train.is_relative() {
            spec.train = root.join(&spec.train);
        }
        if spec.test.is_relative() {
            spec.test = root.join(&spec.test);
        }
        spec
    }

    pub fn map_label(&self, raw: &str) -> Option<Label> {
        let raw = raw.trim();
        if self.positive.iter().any(|p| p == raw) {
            Some(Label::Positive)
        } else if self.negative.iter().any(|n| n == raw) {
            Some(Label::Negative)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub spec: DatasetSpec,
}

impl DatasetSplit {
    pub fn name(&self) -> &str {
        &self.spec.name
    }
}

fn read_examples(spec: &DatasetSpec, path: &Path, mode: PreprocessMode, aliases: &EmojiAliasTable) -> Result<Vec<LabeledExample>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(spec.delimiter as u8)
        .quoting(spec.delimiter != '\t')
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::format("dataset file", format!("{}: {other:?}", path.display())),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::format("dataset file", format!("{}: {e}", path.display())))?
        .clone();
    let column = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::MissingColumn {
            dataset: spec.name.clone(),
            column: name.to_string(),
            path: path.to_path_buf(),
        })
    };
    let (id_col, text_col, label_col) = (column(&spec.id_column)?, column(&spec.text_column)?, column(&spec.label_column)?);

    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| Error::format("dataset file", format!("{}:{row}: {e}", path.display())))?;
        let field = |c: usize| {
            record.get(c).ok_or_else(|| Error::Dataset {
                dataset: spec.name.clone(),
                detail: format!("{}:{row}: too few columns", path.display()),
            })
        };
        let raw_label = field(label_col)?;
        let label = spec.map_label(raw_label).ok_or_else(|| Error::UnknownLabel {
            dataset: spec.name.clone(),
            label: raw_label.to_string(),
            row,
        })?;
        let raw_text = field(text_col)?;
        if raw_text.trim().is_empty() {
            return Err(Error::Dataset {
                dataset: spec.name.clone(),
                detail: format!("{}:{row}: empty text", path.display()),
            });
        }
        out.push(LabeledExample {
            id: field(id_col)?.trim().to_string(),
            text: preprocess(raw_text, mode, aliases),
            label,
        });
    }
    Ok(out)
}

/// Reads both splits, maps labels and applies fine-tuning preprocessing.
pub fn load(spec: &DatasetSpec, aliases: &EmojiAliasTable) -> Result<DatasetSplit> {
    load_with_mode(spec, PreprocessMode::Finetuning, aliases)
}

pub fn load_with_mode(spec: &DatasetSpec, mode: PreprocessMode, aliases: &EmojiAliasTable) -> Result<DatasetSplit> {
    spec.check()?;
    let train = read_examples(spec, &spec.train, mode, aliases)?;
    let test = read_examples(spec, &spec.test, mode, aliases)?;
    let train_ids: HashSet<&str> = train.iter().map(|e| e.id.as_str()).collect();
    if let Some(dup) = test.iter().find(|e| train_ids.contains(e.id.as_str())) {
        return Err(Error::Dataset {
            dataset: spec.name.clone(),
            detail: format!("id {:?} appears in both train and test", dup.id),
        });
    }
    Ok(DatasetSplit {
        train,
        test,
        spec: spec.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountCheck {
    pub name: String,
    pub expected: usize,
    pub actual: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub dataset: String,
    pub checks: Vec<CountCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CountCheck> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

fn positives(examples: &[LabeledExample]) -> usize {
    examples.iter().filter(|e| e.label == Label::Positive).count()
}

/// Compares split sizes and positive counts with the expected counts.
/// A dataset without expected counts yields an empty, non-passing report.
pub fn validate(split: &DatasetSplit) -> ValidationReport {
    let mut checks = Vec::new();
    if let Some(exp) = split.spec.expected {
        let mut check = |name: &str, expected: usize, actual: usize| {
            checks.push(CountCheck {
                name: name.to_string(),
                expected,
                actual,
                pass: expected == actual,
            })
        };
        check("train size", exp.train, split.train.len());
        check("test size", exp.test, split.test.len());
        check("train positives", exp.train_positive, positives(&split.train));
        check("test positives", exp.test_positive, positives(&split.test));
    }
    ValidationReport {
        dataset: split.spec.name.clone(),
        checks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn spec_named(name: &str) -> DatasetSpec {
        DatasetSpec::bundled().into_iter().find(|s| s.name == name).unwrap()
    }

    #[test]
    fn bundled_layouts_carry_official_counts() {
        let o = spec_named("offenseval").expected.unwrap();
        assert_eq!((o.train, o.test, o.train_positive, o.test_positive), (13_240, 860, 4_400, 240));
        let a = spec_named("abuseval").expected.unwrap();
        assert_eq!((a.train, a.test, a.train_positive, a.test_positive), (13_240, 860, 2_749, 178));
        let h = spec_named("hateval").expected.unwrap();
        assert_eq!((h.train, h.test, h.train_positive, h.test_positive), (10_000, 3_000, 4_165, 1_252));
    }

    #[test]
    fn label_mappings() {
        let o = spec_named("offenseval");
        assert_eq!(o.map_label("OFF"), Some(Label::Positive));
        assert_eq!(o.map_label("NOT"), Some(Label::Negative));
        let h = spec_named("hateval");
        assert_eq!(h.map_label("1"), Some(Label::Positive));
        assert_eq!(h.map_label("0"), Some(Label::Negative));
        let a = spec_named("abuseval");
        assert_eq!(a.map_label("EXP"), Some(Label::Positive));
        assert_eq!(a.map_label("IMP"), Some(Label::Positive));
        assert_eq!(a.map_label("NOTABU"), Some(Label::Negative));
        assert_eq!(a.map_label("OFF"), None);
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    fn offenseval_in(dir: &Path, train: &str, test: &str) -> DatasetSpec {
        let mut spec = spec_named("offenseval");
        spec.train = write(dir, "train.tsv", train);
        spec.test = write(dir, "test.tsv", test);
        spec
    }

    #[test]
    fn load_maps_and_preprocesses() {
        let dir = tempfile::tempdir().unwrap();
        let spec = offenseval_in(
            dir.path(),
            "id\ttweet\tsubtask_a\n1\t@USER you are #awful\tOFF\n2\tnice  day\tNOT\n",
            "id\ttweet\tsubtask_a\n3\tsee http://x.y\tNOT\n",
        );
        let split = load(&spec, EmojiAliasTable::pinned()).unwrap();
        assert_eq!(split.train[0].text, "@USER you are awful");
        assert_eq!(split.train[0].label, Label::Positive);
        assert_eq!(split.train[1].text, "nice day");
        assert_eq!(split.test[0].text, "see URL");
        let report = validate(&split);
        assert!(!report.passed());
        assert_eq!(report.failures().count(), 4);
    }

    #[test]
    fn header_only_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = offenseval_in(dir.path(), "id\ttweet\tsubtask_a\n", "id\ttweet\tsubtask_a\n");
        let split = load(&spec, EmojiAliasTable::pinned()).unwrap();
        assert!(split.train.is_empty() && split.test.is_empty());
        assert!(!validate(&split).passed());
    }

    #[test]
    fn unknown_label_names_label_and_row() {
        let dir = tempfile::tempdir().unwrap();
        let spec = offenseval_in(
            dir.path(),
            "id\ttweet\tsubtask_a\n1\tok\tNOT\n2\thm\tMAYBE\n",
            "id\ttweet\tsubtask_a\n",
        );
        let err = load(&spec, EmojiAliasTable::pinned()).unwrap_err();
        assert!(matches!(err, Error::UnknownLabel { ref label, row: 3, .. } if label == "MAYBE"), "{err}");
    }

    #[test]
    fn missing_column_and_overlap() {
        let dir = tempfile::tempdir().unwrap();
        let spec = offenseval_in(dir.path(), "id\ttext\tsubtask_a\n", "id\ttweet\tsubtask_a\n");
        assert!(matches!(load(&spec, EmojiAliasTable::pinned()), Err(Error::MissingColumn { .. })));
        let spec = offenseval_in(
            dir.path(),
            "id\ttweet\tsubtask_a\n1\ta\tNOT\n",
            "id\ttweet\tsubtask_a\n1\tb\tOFF\n",
        );
        assert!(matches!(load(&spec, EmojiAliasTable::pinned()), Err(Error::Dataset { .. })));
    }

    #[test]
    fn comma_separated_with_quotes() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = spec_named("hateval");
        spec.delimiter = ',';
        spec.train = write(dir.path(), "train.csv", "id,text,HS,TR,AG\n1,\"hello, there\",1,0,0\n");
        spec.test = write(dir.path(), "test.csv", "id,text,HS,TR,AG\n2,bye,0,0,0\n");
        let split = load(&spec, EmojiAliasTable::pinned()).unwrap();
        assert_eq!(split.train[0].text, "hello, there");
        assert_eq!(split.train[0].label, Label::Positive);
    }
}
