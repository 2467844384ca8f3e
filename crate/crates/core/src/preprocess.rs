//! Text normalization applied before retraining and before fine-tuning.
//!
//! Rules run in a fixed order: user mentions become `@USER`, URLs become
//! `URL`, emoji are replaced by their `:alias:` text, every `#` is dropped and
//! runs of horizontal whitespace collapse to one space. Retraining mode also
//! removes blank lines. Case is left untouched; the tokenizer lowercases.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::str::FromStr;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MENTION_PLACEHOLDER: &str = "@USER";
pub const URL_PLACEHOLDER: &str = "URL";

static MENTION_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"@\w+").unwrap());
static URL_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?i)(?:https?://|www\.)\S*").unwrap());
static HSPACE_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"[^\S\n]+").unwrap());

static PINNED_TABLE: Lazy<EmojiAliasTable> = Lazy::new(|| {
    EmojiAliasTable::parse(include_str!("../data/emoji_aliases.tsv"))
        .expect("bundled emoji alias table is well-formed")
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreprocessMode {
    /// Corpus text for MLM retraining; blank lines are removed.
    Retraining,
    /// Benchmark text for classifier fine-tuning.
    Finetuning,
}

impl FromStr for PreprocessMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "retraining" | "retrain" | "pretrain" => Ok(PreprocessMode::Retraining),
            "finetuning" | "finetune" | "fine-tuning" => Ok(PreprocessMode::Finetuning),
            other => Err(Error::invalid(format!("unknown preprocessing mode {other:?}"))),
        }
    }
}

/// Emoji codepoint sequence → `:alias:` mapping.
///
/// The on-disk form is a header line `# emoji-aliases <version> ...` followed
/// by one `CODEPOINTS<TAB>:alias:` row per entry, codepoints written as
/// space-separated uppercase hex.
#[derive(Debug, Clone)]
pub struct EmojiAliasTable {
    version: String,
    header: String,
    entries: Vec<(String, String)>,
    map: HashMap<String, usize>,
    starts: HashSet<char>,
    max_chars: usize,
}

impl EmojiAliasTable {
    /// The table compiled into the crate.
    pub fn pinned() -> &'static EmojiAliasTable {
        &PINNED_TABLE
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format("emoji alias table", "empty file"))?;
        let version = header
            .strip_prefix("# emoji-aliases ")
            .and_then(|rest| rest.split_whitespace().next())
            .ok_or_else(|| Error::format("emoji alias table", "missing version header"))?
            .to_string();

        let mut entries = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (codes, alias) = line.split_once('\t').ok_or_else(|| {
                Error::format("emoji alias table", format!("line {}: expected two columns", lineno + 2))
            })?;
            let mut seq = String::new();
            for code in codes.split_whitespace() {
                let ch = u32::from_str_radix(code, 16)
                    .ok()
                    .and_then(char::from_u32)
                    .ok_or_else(|| {
                        Error::format("emoji alias table", format!("line {}: bad codepoint {code}", lineno + 2))
                    })?;
                seq.push(ch);
            }
            let valid_alias = alias.len() > 2
                && alias.starts_with(':')
                && alias.ends_with(':')
                && !alias[1..alias.len() - 1].contains(|c: char| c == ':' || c.is_whitespace());
            if seq.is_empty() || !valid_alias {
                return Err(Error::format(
                    "emoji alias table",
                    format!("line {}: bad entry {line:?}", lineno + 2),
                ));
            }
            entries.push((seq, alias.to_string()));
        }
        Ok(Self::from_entries(version, header.to_string(), entries))
    }

    fn from_entries(version: String, header: String, entries: Vec<(String, String)>) -> Self {
        let mut map = HashMap::with_capacity(entries.len());
        let mut starts = HashSet::new();
        let mut max_chars = 0;
        for (i, (seq, _)) in entries.iter().enumerate() {
            map.insert(seq.clone(), i);
            starts.insert(seq.chars().next().unwrap());
            max_chars = max_chars.max(seq.chars().count());
        }
        EmojiAliasTable {
            version,
            header,
            entries,
            map,
            starts,
            max_chars,
        }
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn alias(&self, sequence: &str) -> Option<&str> {
        self.map.get(sequence).map(|&i| self.entries[i].1.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(s, a)| (s.as_str(), a.as_str()))
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::with_capacity(self.entries.len() * 24);
        out.push_str(&self.header);
        out.push('\n');
        for (seq, alias) in &self.entries {
            let codes: Vec<String> = seq.chars().map(|c| format!("{:04X}", c as u32)).collect();
            let _ = writeln!(out, "{}\t{}", codes.join(" "), alias);
        }
        out
    }
}

/// Replaces every mapped emoji sequence with its alias, longest match first.
pub fn demojize(text: &str, aliases: &EmojiAliasTable) -> String {
    if !text.chars().any(|c| aliases.starts.contains(&c)) {
        return text.to_string();
    }
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len() + 16);
    let mut candidate = String::new();
    let mut i = 0;
    while i < chars.len() {
        if aliases.starts.contains(&chars[i]) {
            let longest = aliases.max_chars.min(chars.len() - i);
            let mut matched = None;
            for len in (1..=longest).rev() {
                candidate.clear();
                candidate.extend(&chars[i..i + len]);
                if let Some(alias) = aliases.alias(&candidate) {
                    matched = Some((len, alias));
                    break;
                }
            }
            if let Some((len, alias)) = matched {
                out.push_str(alias);
                i += len;
                continue;
            }
        }
        out.push(chars[i]);
        i += 1;
    }
    out
}

fn replace_mentions(text: &str) -> String {
    MENTION_RE.replace_all(text, MENTION_PLACEHOLDER).into_owned()
}

fn replace_urls(text: &str) -> String {
    URL_RE.replace_all(text, URL_PLACEHOLDER).into_owned()
}

fn collapse_spaces(text: &str) -> String {
    HSPACE_RE.replace_all(text, " ").into_owned()
}

fn remove_blank_lines(text: &str) -> String {
    if !text.contains('\n') {
        return text.to_string();
    }
    text.split('\n')
        .filter(|line| !line.trim().is_empty())
        .collect::<Vec<_>>()
        .join("\n")
}

/// One pass over the rules. Returns whether any `#` was removed.
fn apply_rules(text: &str, mode: PreprocessMode, aliases: &EmojiAliasTable) -> (String, bool) {
    let text = replace_mentions(text);
    let text = replace_urls(&text);
    let text = demojize(&text, aliases);
    let had_hash = text.contains('#');
    let text = if had_hash { text.replace('#', "") } else { text };
    let text = collapse_spaces(&text);
    let text = match mode {
        PreprocessMode::Retraining => remove_blank_lines(&text),
        PreprocessMode::Finetuning => text,
    };
    (text, had_hash)
}

/// Normalizes `text` for the given mode. The result is a fixed point:
/// `preprocess(preprocess(x)) == preprocess(x)`.
pub fn preprocess(text: &str, mode: PreprocessMode, aliases: &EmojiAliasTable) -> String {
    let (once, stripped_hash) = apply_rules(text, mode, aliases);
    // Dropping '#' can splice new mentions or URLs together ("@#user",
    // "ht#tp://"). A second pass over '#'-free text cannot.
    if stripped_hash {
        apply_rules(&once, mode, aliases).0
    } else {
        once
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ft(s: &str) -> String {
        preprocess(s, PreprocessMode::Finetuning, EmojiAliasTable::pinned())
    }

    fn rt(s: &str) -> String {
        preprocess(s, PreprocessMode::Retraining, EmojiAliasTable::pinned())
    }

    #[test]
    fn hashtag_symbol_removed() {
        assert_eq!(ft("#kadiricinadalet"), "kadiricinadalet");
    }

    #[test]
    fn pleading_face_alias() {
        assert_eq!(ft("\u{1F97A}"), ":pleading_face:");
        assert_eq!(demojize("\u{1F97A}", EmojiAliasTable::pinned()), ":pleading_face:");
    }

    #[test]
    fn mention_url_whitespace_compose() {
        assert_eq!(ft("@john see https://example.com/x   now"), "@USER see URL now");
    }

    #[test]
    fn plain_text_unchanged() {
        assert_eq!(ft("plain words"), "plain words");
        assert_eq!(demojize("plain words", EmojiAliasTable::pinned()), "plain words");
    }

    #[test]
    fn retraining_removes_blank_lines() {
        assert_eq!(rt("a  b\n\n\nc"), "a b\nc");
        assert_eq!(ft("a  b\n\n\nc"), "a b\n\n\nc");
    }

    #[test]
    fn repeated_emoji() {
        assert_eq!(
            demojize("\u{1F97A}\u{1F97A}", EmojiAliasTable::pinned()),
            ":pleading_face::pleading_face:"
        );
    }

    #[test]
    fn longest_sequence_wins() {
        // thumbs up + medium skin tone is its own entry
        let table = EmojiAliasTable::pinned();
        let seq = "\u{1F44D}\u{1F3FD}";
        let alias = table.alias(seq).unwrap();
        assert_eq!(demojize(seq, table), alias);
        assert_ne!(alias, table.alias("\u{1F44D}").unwrap());
    }

    #[test]
    fn hash_removal_reaches_fixed_point() {
        assert_eq!(ft("@#john"), "@USER");
        assert_eq!(ft("ht#tp://x.y"), "URL");
        assert_eq!(ft("#\u{FE0F}\u{20E3}"), ":keycap_:");
    }

    #[test]
    fn table_round_trips() {
        let table = EmojiAliasTable::pinned();
        let again = EmojiAliasTable::parse(&table.to_file_string()).unwrap();
        assert_eq!(again.len(), table.len());
        assert_eq!(again.version(), "v1");
        assert_eq!(again.to_file_string(), table.to_file_string());
    }

    #[test]
    fn bad_table_rejected() {
        assert!(EmojiAliasTable::parse("").is_err());
        assert!(EmojiAliasTable::parse("# emoji-aliases v1\n1F600\tsmile").is_err());
        assert!(EmojiAliasTable::parse("# emoji-aliases v1\nZZZZ\t:x:").is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("retraining".parse::<PreprocessMode>().unwrap(), PreprocessMode::Retraining);
        assert_eq!("finetuning".parse::<PreprocessMode>().unwrap(), PreprocessMode::Finetuning);
        assert!("other".parse::<PreprocessMode>().is_err());
    }
}
