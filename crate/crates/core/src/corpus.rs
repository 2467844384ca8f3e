//! Corpus reconstruction from newline-delimited comment dumps.
//!
//! Records are filtered by community allowlist and an inclusive month window,
//! preprocessed, counted per community and finally split into a retraining
//! part and a held-out part.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{NaiveDate, NaiveTime};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Basis used for every token count reported by this module.
pub const TOKEN_BASIS: &str = "whitespace";

pub const DEFAULT_DROP_BODIES: [&str; 2] = ["[deleted]", "[removed]"];

const BUNDLED_ALLOWLIST: &str = include_str!("../data/banned_communities.txt");
const BUNDLED_REFERENCE: &str = include_str!("../data/reference_counts.tsv");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawComment {
    pub body: String,
    /// Trimmed, lowercased.
    pub subreddit: String,
    pub created_utc: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    MissingField,
    MalformedRecord,
    EmptyBody,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Parsed {
    Comment(RawComment),
    Skip(SkipReason),
}

pub fn normalize_community(name: &str) -> String {
    name.trim().to_lowercase()
}

fn timestamp(value: &Value) -> Option<i64> {
    match value {
        Value::Number(n) => n
            .as_i64()
            .or_else(|| n.as_f64().filter(|f| f.fract() == 0.0 && f.abs() < 1e15).map(|f| f as i64)),
        Value::String(s) => s.trim().parse::<i64>().ok(),
        _ => None,
    }
}

/// Parses one dump line. Never fails; bad lines come back as a skip marker.
pub fn parse_record(line: &str) -> Parsed {
    let value: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(_) => return Parsed::Skip(SkipReason::MalformedRecord),
    };
    let Value::Object(obj) = value else {
        return Parsed::Skip(SkipReason::MalformedRecord);
    };
    let (Some(body), Some(sub), Some(ts)) =
        (obj.get("body"), obj.get("subreddit"), obj.get("created_utc"))
    else {
        return Parsed::Skip(SkipReason::MissingField);
    };
    let (Value::String(body), Value::String(sub)) = (body, sub) else {
        return Parsed::Skip(SkipReason::MalformedRecord);
    };
    let subreddit = normalize_community(sub);
    let created_utc = match timestamp(ts) {
        Some(t) if t > 0 => t,
        _ => return Parsed::Skip(SkipReason::MalformedRecord),
    };
    if subreddit.is_empty() {
        return Parsed::Skip(SkipReason::MalformedRecord);
    }
    if body.is_empty() {
        return Parsed::Skip(SkipReason::EmptyBody);
    }
    Parsed::Comment(RawComment {
        body: body.clone(),
        subreddit,
        created_utc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::invalid(format!("month {month} out of range")));
        }
        Ok(YearMonth { year, month })
    }

    fn next(self) -> YearMonth {
        if self.month == 12 {
            YearMonth { year: self.year + 1, month: 1 }
        } else {
            YearMonth { year: self.year, month: self.month + 1 }
        }
    }

    /// First second of the month, UTC.
    pub fn start_timestamp(self) -> i64 {
        NaiveDate::from_ymd_opt(self.year, self.month, 1)
            .expect("validated year-month")
            .and_time(NaiveTime::MIN)
            .and_utc()
            .timestamp()
    }
}

impl FromStr for YearMonth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("expected YYYY-MM, got {s:?}"));
        let (y, m) = s.trim().split_once('-').ok_or_else(bad)?;
        let year = y.parse().map_err(|_| bad())?;
        let month = m.parse().map_err(|_| bad())?;
        YearMonth::new(year, month)
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl Serialize for YearMonth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for YearMonth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusConfig {
    allowlist: BTreeSet<String>,
    window_start: YearMonth,
    window_end: YearMonth,
    drop_bodies: BTreeSet<String>,
}

impl CorpusConfig {
    pub fn new<I, S>(allowlist: I, window_start: YearMonth, window_end: YearMonth) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let allowlist: BTreeSet<String> = allowlist
            .into_iter()
            .map(|s| normalize_community(s.as_ref()))
            .filter(|s| !s.is_empty())
            .collect();
        if allowlist.is_empty() {
            return Err(Error::invalid("community allowlist is empty"));
        }
        if window_start > window_end {
            return Err(Error::invalid(format!(
                "window start {window_start} is after window end {window_end}"
            )));
        }
        Ok(CorpusConfig {
            allowlist,
            window_start,
            window_end,
            drop_bodies: DEFAULT_DROP_BODIES.iter().map(|s| s.to_string()).collect(),
        })
    }

    /// The banned-community list with the January 2012 – June 2015 window.
    pub fn banned_communities() -> Self {
        CorpusConfig::new(
            parse_allowlist(BUNDLED_ALLOWLIST),
            YearMonth { year: 2012, month: 1 },
            YearMonth { year: 2015, month: 6 },
        )
        .expect("bundled allowlist is non-empty")
    }

    pub fn with_drop_bodies<I, S>(mut self, bodies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.drop_bodies = bodies.into_iter().map(Into::into).collect();
        self
    }

    pub fn allowlist(&self) -> &BTreeSet<String> {
        &self.allowlist
    }

    pub fn window(&self) -> (YearMonth, YearMonth) {
        (self.window_start, self.window_end)
    }

    pub fn drop_bodies(&self) -> &BTreeSet<String> {
        &self.drop_bodies
    }

    /// Half-open `[start, end)` timestamp range covering both boundary months.
    pub fn window_bounds(&self) -> (i64, i64) {
        (
            self.window_start.start_timestamp(),
            self.window_end.next().start_timestamp(),
        )
    }
}

/// Allowlist file: one community per line, `#` starts a comment.
pub fn parse_allowlist(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .map(normalize_community)
        .filter(|l| !l.is_empty())
        .collect()
}

pub fn read_allowlist(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_allowlist(&text))
}

/// Reference per-community message counts and corpus totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCounts {
    pub communities: BTreeMap<String, usize>,
    pub stated_messages: usize,
    pub stated_tokens: usize,
}

impl ReferenceCounts {
    pub fn bundled() -> Self {
        let mut communities = BTreeMap::new();
        let mut stated_messages = 0;
        let mut stated_tokens = 0;
        for line in BUNDLED_REFERENCE.lines() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("#!messages ") {
                stated_messages = rest.trim().parse().expect("bundled total");
            } else if let Some(rest) = line.strip_prefix("#!tokens ") {
                stated_tokens = rest.trim().parse().expect("bundled total");
            } else if !line.is_empty() && !line.starts_with('#') {
                let (name, count) = line.split_once('\t').expect("two columns");
                communities.insert(name.to_string(), count.parse().expect("bundled count"));
            }
        }
        ReferenceCounts {
            communities,
            stated_messages,
            stated_tokens,
        }
    }

    pub fn table_total(&self) -> usize {
        self.communities.values().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rejection {
    Community,
    OutsideWindow,
    DroppedBody,
    BlankBody,
}

/// Explains why `accept` would say no.
pub fn check(c: &RawComment, cfg: &CorpusConfig) -> std::result::Result<(), Rejection> {
    if !cfg.allowlist.contains(&normalize_community(&c.subreddit)) {
        return Err(Rejection::Community);
    }
    let (start, end) = cfg.window_bounds();
    if c.created_utc < start || c.created_utc >= end {
        return Err(Rejection::OutsideWindow);
    }
    if cfg.drop_bodies.contains(c.body.as_str()) || cfg.drop_bodies.contains(c.body.trim()) {
        return Err(Rejection::DroppedBody);
    }
    if c.body.trim().is_empty() {
        return Err(Rejection::BlankBody);
    }
    Ok(())
}

pub fn accept(c: &RawComment, cfg: &CorpusConfig) -> bool {
    check(c, cfg).is_ok()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanDocument {
    pub text: String,
    pub community: String,
    pub created_utc: i64,
}

pub fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    documents: Vec<CleanDocument>,
    stats: BTreeMap<String, usize>,
    token_count: usize,
}

impl Corpus {
    pub fn from_documents(documents: Vec<CleanDocument>) -> Self {
        let mut stats = BTreeMap::new();
        let mut token_count = 0;
        for doc in &documents {
            *stats.entry(doc.community.clone()).or_insert(0) += 1;
            token_count += whitespace_tokens(&doc.text);
        }
        Corpus {
            documents,
            stats,
            token_count,
        }
    }

    /// Wraps bare texts, e.g. synthetic corpora, under one community label.
    pub fn from_texts<I, S>(community: &str, texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Corpus::from_documents(
            texts
                .into_iter()
                .map(|t| CleanDocument {
                    text: t.into(),
                    community: community.to_string(),
                    created_utc: 1,
                })
                .collect(),
        )
    }

    pub fn documents(&self) -> &[CleanDocument] {
        &self.documents
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.documents.iter().map(|d| d.text.as_str())
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn stats(&self) -> &BTreeMap<String, usize> {
        &self.stats
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for doc in &self.documents {
            serde_json::to_writer(&mut out, doc)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_jsonl(BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut docs = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: CleanDocument = serde_json::from_str(&line).map_err(|e| {
                Error::format("corpus file", format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            docs.push(doc);
        }
        Ok(Corpus::from_documents(docs))
    }
}

/// Per-community counts; the sum equals `corpus.len()`.
pub fn stats(corpus: &Corpus) -> BTreeMap<String, usize> {
    corpus.stats.clone()
}

/// Line accounting for one build. `accepted + skipped + rejected == total_lines`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub total_lines: usize,
    pub accepted: usize,
    pub skipped: BTreeMap<SkipReason, usize>,
    pub rejected: BTreeMap<Rejection, usize>,
}

impl BuildReport {
    pub fn skipped_total(&self) -> usize {
        self.skipped.values().sum()
    }

    pub fn rejected_total(&self) -> usize {
        self.rejected.values().sum()
    }

    fn merge(&mut self, other: BuildReport) {
        self.total_lines += other.total_lines;
        self.accepted += other.accepted;
        for (k, v) in other.skipped {
            *self.skipped.entry(k).or_insert(0) += v;
        }
        for (k, v) in other.rejected {
            *self.rejected.entry(k).or_insert(0) += v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusBuild {
    pub corpus: Corpus,
    pub report: BuildReport,
}

/// Streaming build over already-split lines. `None` items are lines that
/// were not valid UTF-8.
fn build_lines<I, F>(lines: I, cfg: &CorpusConfig, pre: &F) -> (Vec<CleanDocument>, BuildReport)
where
    I: IntoIterator<Item = Option<String>>,
    F: Fn(&str) -> String + ?Sized,
{
    let mut docs = Vec::new();
    let mut report = BuildReport::default();
    for line in lines {
        report.total_lines += 1;
        let parsed = match line {
            Some(l) => parse_record(&l),
            None => Parsed::Skip(SkipReason::MalformedRecord),
        };
        match parsed {
            Parsed::Skip(reason) => *report.skipped.entry(reason).or_insert(0) += 1,
            Parsed::Comment(c) => match check(&c, cfg) {
                Err(why) => *report.rejected.entry(why).or_insert(0) += 1,
                Ok(()) => {
                    report.accepted += 1;
                    docs.push(CleanDocument {
                        text: pre(&c.body),
                        community: c.subreddit,
                        created_utc: c.created_utc,
                    });
                }
            },
        }
    }
    (docs, report)
}

/// Builds a corpus from an in-memory line stream, preserving stream order.
pub fn build<I, S, F>(stream: I, cfg: &CorpusConfig, pre: F) -> CorpusBuild
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
    F: Fn(&str) -> String,
{
    let (docs, report) = build_lines(
        stream.into_iter().map(|s| Some(s.as_ref().to_string())),
        cfg,
        &pre,
    );
    CorpusBuild {
        corpus: Corpus::from_documents(docs),
        report,
    }
}

/// Opens a dump file, decompressing by extension (`.gz`, `.bz2`, `.zst`).
pub fn open_dump(path: &Path) -> Result<Box<dyn BufRead + Send>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let reader: Box<dyn Read + Send> = match ext {
        "gz" => Box::new(flate2::read::MultiGzDecoder::new(file)),
        "bz2" => Box::new(bzip2::read::MultiBzDecoder::new(file)),
        "zst" => Box::new(zstd::stream::read::Decoder::new(file).map_err(|e| Error::io(path, e))?),
        _ => Box::new(file),
    };
    Ok(Box::new(BufReader::with_capacity(1 << 20, reader)))
}

fn read_lines(path: &Path) -> Result<Vec<Option<String>>> {
    let mut reader = open_dump(path)?;
    let mut lines = Vec::new();
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        if buf.last() == Some(&b'\n') {
            buf.pop();
            if buf.last() == Some(&b'\r') {
                buf.pop();
            }
        }
        lines.push(String::from_utf8(buf.clone()).ok());
    }
    Ok(lines)
}

/// Builds from one or more dump files. Shards are parsed on up to `workers`
/// threads; documents are ordered by (shard index, line index) whatever the
/// worker count.
pub fn build_files<F>(paths: &[PathBuf], cfg: &CorpusConfig, pre: F, workers: usize) -> Result<CorpusBuild>
where
    F: Fn(&str) -> String + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    let shards: Vec<Result<(Vec<CleanDocument>, BuildReport)>> = pool.install(|| {
        paths
            .par_iter()
            .map(|p| Ok(build_lines(read_lines(p)?, cfg, &pre)))
            .collect()
    });
    let mut docs = Vec::new();
    let mut report = BuildReport::default();
    for shard in shards {
        let (d, r) = shard?;
        docs.extend(d);
        report.merge(r);
    }
    Ok(CorpusBuild {
        corpus: Corpus::from_documents(docs),
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitCorpus {
    pub train: Corpus,
    pub heldout: Corpus,
    pub seed: u64,
}

/// Seeded uniform train/held-out partition. Both parts keep source order.
pub fn split(corpus: &Corpus, heldout_size: usize, seed: u64) -> Result<SplitCorpus> {
    let n = corpus.len();
    if heldout_size > n {
        return Err(Error::invalid(format!(
            "held-out size {heldout_size} exceeds corpus size {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held = vec![false; n];
    for i in index::sample(&mut rng, n, heldout_size) {
        held[i] = true;
    }
    let (mut train, mut heldout) = (Vec::with_capacity(n - heldout_size), Vec::with_capacity(heldout_size));
    for (doc, h) in corpus.documents.iter().zip(held) {
        if h {
            heldout.push(doc.clone());
        } else {
            train.push(doc.clone());
        }
    }
    Ok(SplitCorpus {
        train: Corpus::from_documents(train),
        heldout: Corpus::from_documents(heldout),
        seed,
    })
}

/// Tab-separated per-community table with totals and the token basis.
pub fn render_stats(corpus: &Corpus) -> String {
    let mut out = String::from("community\tmessages\n");
    for (name, count) in &corpus.stats {
        out.push_str(&format!("{name}\t{count}\n"));
    }
    out.push_str(&format!("TOTAL\t{}\n", corpus.len()));
    out.push_str(&format!("# tokens ({TOKEN_BASIS}): {}\n", corpus.token_count));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub token_basis: String,
    pub messages: usize,
    pub tokens: usize,
    pub communities: BTreeMap<String, usize>,
    pub reference: ReferenceCounts,
    pub reference_table_total: usize,
}

impl StatsReport {
    pub fn new(corpus: &Corpus) -> Self {
        let reference = ReferenceCounts::bundled();
        StatsReport {
            token_basis: TOKEN_BASIS.to_string(),
            messages: corpus.len(),
            tokens: corpus.token_count,
            communities: corpus.stats.clone(),
            reference_table_total: reference.table_total(),
            reference,
        }
    }
}
