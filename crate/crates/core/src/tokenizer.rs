//! Greedy pair-merge subword vocabulary with longest-match segmentation.
//!
//! Every word is prefixed with the boundary symbol `▁` before merging, so
//! decoding is a plain concatenation followed by replacing `▁` with spaces.
//! Natural occurrences of `▁` cannot be represented and encode to `[UNK]`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WORD_BOUNDARY: char = '\u{2581}';

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

const HEADER_PREFIX: &str = "#vocab v1";

pub fn is_special(id: u32) -> bool {
    (id as usize) < SPECIAL_TOKENS.len()
}

/// A token-id sequence wrapped as `[CLS] … [SEP]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Anything that can turn normalized text into model input ids.
pub trait Tokenizer {
    fn vocab_size(&self) -> usize;
    fn encode(&self, text: &str, max_len: usize) -> TokenSequence;
    fn decode(&self, seq: &TokenSequence) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    uncased: bool,
    max_token_chars: usize,
}

fn word_symbols(word: &str) -> Vec<String> {
    std::iter::once(WORD_BOUNDARY)
        .chain(word.chars())
        .map(String::from)
        .collect()
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>, uncased: bool) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(Error::format("vocabulary", format!("token {i} is empty or contains whitespace")));
            }
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate token {tok:?}")));
            }
        }
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::format("vocabulary", format!("special token {special} must have id {i}")));
            }
        }
        let max_token_chars = tokens.iter().map(|t| t.chars().count()).max().unwrap_or(1);
        Ok(Vocab {
            tokens,
            index,
            uncased,
            max_token_chars,
        })
    }

    /// Trains a vocabulary of exactly `target_size` entries.
    ///
    /// Starts from the special tokens, the boundary symbol and every
    /// character seen, then repeatedly merges the most frequent adjacent
    /// symbol pair. Frequency ties go to the lexicographically smallest pair.
    pub fn train<'a, I>(texts: I, target_size: usize, uncased: bool) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
        for text in texts {
            let text = if uncased { text.to_lowercase() } else { text.to_string() };
            for word in text.split_whitespace() {
                if !word.contains(WORD_BOUNDARY) {
                    *word_freq.entry(word.to_string()).or_insert(0) += 1;
                }
            }
        }
        if word_freq.is_empty() {
            return Err(Error::invalid("cannot train a vocabulary on an empty corpus"));
        }

        let mut words: Vec<(Vec<String>, u64)> =
            word_freq.into_iter().map(|(w, f)| (word_symbols(&w), f)).collect();
        let alphabet: BTreeSet<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
        let base = SPECIAL_TOKENS.len() + alphabet.len();
        if target_size < base {
            return Err(Error::invalid(format!(
                "target size {target_size} is below the {base} special tokens and observed characters"
            )));
        }

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(alphabet);
        let mut known: BTreeSet<String> = tokens.iter().cloned().collect();

        while tokens.len() < target_size {
            let mut pairs: HashMap<(&str, &str), u64> = HashMap::new();
            for (syms, freq) in &words {
                for w in syms.windows(2) {
                    *pairs.entry((w[0].as_str(), w[1].as_str())).or_insert(0) += freq;
                }
            }
            let best = pairs
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
                .map(|((l, r), _)| (l.to_string(), r.to_string()));
            let Some((left, right)) = best else {
                return Err(Error::invalid(format!(
                    "corpus supports at most {} vocabulary entries, {target_size} requested",
                    tokens.len()
                )));
            };
            let merged = format!("{left}{right}");
            for (syms, _) in words.iter_mut() {
                let mut i = 0;
                while i + 1 < syms.len() {
                    if syms[i] == left && syms[i + 1] == right {
                        syms[i] = merged.clone();
                        syms.remove(i + 1);
                    }
                    i += 1;
                }
            }
            if known.insert(merged.clone()) {
                tokens.push(merged);
            }
        }
        Vocab::from_tokens(tokens, uncased)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn uncased(&self) -> bool {
        self.uncased
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn segment_word(&self, word: &str, out: &mut Vec<u32>) {
        if word.contains(WORD_BOUNDARY) {
            out.push(UNK_ID);
            return;
        }
        let chars: Vec<char> = std::iter::once(WORD_BOUNDARY).chain(word.chars()).collect();
        let start = out.len();
        let mut piece = String::new();
        let mut i = 0;
        while i < chars.len() {
            let longest = self.max_token_chars.min(chars.len() - i);
            let mut found = None;
            for len in (1..=longest).rev() {
                piece.clear();
                piece.extend(&chars[i..i + len]);
                if let Some(&id) = self.index.get(&piece) {
                    if !is_special(id) {
                        found = Some((id, len));
                        break;
                    }
                }
            }
            match found {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                }
                None => {
                    out.truncate(start);
                    out.push(UNK_ID);
                    return;
                }
            }
        }
    }

    /// Subword ids of `text` without `[CLS]`/`[SEP]` and without truncation.
    pub fn pieces(&self, text: &str) -> Vec<u32> {
        let text = if self.uncased { text.to_lowercase() } else { text.to_string() };
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            self.segment_word(word, &mut out);
        }
        out
    }

    pub fn encode(&self, text: &str, max_len: usize) -> TokenSequence {
        let max_len = max_len.max(2);
        let mut pieces = self.pieces(text);
        pieces.truncate(max_len - 2);
        let mut ids = Vec::with_capacity(pieces.len() + 2);
        ids.push(CLS_ID);
        ids.extend(pieces);
        ids.push(SEP_ID);
        TokenSequence { ids }
    }

    /// Splits long texts into consecutive `[CLS] … [SEP]` chunks of at most
    /// `max_len` ids. Texts with no pieces yield no chunks.
    pub fn encode_chunks(&self, text: &str, max_len: usize) -> Vec<TokenSequence> {
        let body = max_len.max(3) - 2;
        self.pieces(text)
            .chunks(body)
            .map(|chunk| {
                let mut ids = Vec::with_capacity(chunk.len() + 2);
                ids.push(CLS_ID);
                ids.extend_from_slice(chunk);
                ids.push(SEP_ID);
                TokenSequence { ids }
            })
            .collect()
    }

    pub fn decode(&self, seq: &TokenSequence) -> Result<String> {
        let mut joined = String::new();
        for &id in &seq.ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::invalid(format!("token id {id} outside vocabulary of {}", self.len())))?;
            match id {
                PAD_ID | CLS_ID | SEP_ID => {}
                UNK_ID | MASK_ID => {
                    joined.push(WORD_BOUNDARY);
                    joined.push_str(tok);
                }
                _ => joined.push_str(tok),
            }
        }
        let text = joined.replace(WORD_BOUNDARY, " ");
        Ok(text.strip_prefix(' ').unwrap_or(&text).to_string())
    }

    /// Header line, then one token per line; line `n` after the header is id `n`.
    pub fn to_file_string(&self) -> String {
        let mut out = format!(
            "{HEADER_PREFIX} uncased={} pad={PAD_ID} unk={UNK_ID} cls={CLS_ID} sep={SEP_ID} mask={MASK_ID} size={}\n",
            self.uncased,
            self.len()
        );
        for tok in &self.tokens {
            let _ = writeln!(out, "{tok}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .filter(|h| h.starts_with(HEADER_PREFIX))
            .ok_or_else(|| Error::format("vocabulary", "missing header line"))?;
        let mut uncased = None;
        let mut size = None;
        for field in header[HEADER_PREFIX.len()..].split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::format("vocabulary", format!("bad header field {field:?}")))?;
            let bad = || Error::format("vocabulary", format!("bad header value {field:?}"));
            match k {
                "uncased" => uncased = Some(v.parse::<bool>().map_err(|_| bad())?),
                "size" => size = Some(v.parse::<usize>().map_err(|_| bad())?),
                "pad" | "unk" | "cls" | "sep" | "mask" => {
                    let expected = SPECIAL_TOKENS
                        .iter()
                        .position(|s| s[1..s.len() - 1].eq_ignore_ascii_case(k))
                        .unwrap();
                    if v.parse::<usize>().map_err(|_| bad())? != expected {
                        return Err(bad());
                    }
                }
                _ => return Err(bad()),
            }
        }
        let tokens: Vec<String> = lines.map(str::to_string).collect();
        if size.is_some_and(|s| s != tokens.len()) {
            return Err(Error::format("vocabulary", "size in header does not match token count"));
        }
        Vocab::from_tokens(tokens, uncased.unwrap_or(true))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::parse(&text)
    }
}

impl Tokenizer for Vocab {
    fn vocab_size(&self) -> usize {
        self.len()
    }

    fn encode(&self, text: &str, max_len: usize) -> TokenSequence {
        Vocab::encode(self, text, max_len)
    }

    fn decode(&self, seq: &TokenSequence) -> Result<String> {
        Vocab::decode(self, seq)
    }
}
