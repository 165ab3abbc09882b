//! Corpus ingestion, wordpiece-style tokenization and occurrence indexing.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Continuation prefix for non-initial subtokens.
pub const CONTINUATION: &str = "##";

pub const DEFAULT_CONTEXT_WINDOW: usize = 64;

/// One side of a binary demographic axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    A,
    B,
}

impl Attribute {
    pub fn other(self) -> Self {
        match self {
            Attribute::A => Attribute::B,
            Attribute::B => Attribute::A,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Attribute::A => 0,
            Attribute::B => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Attribute::A
        } else {
            Attribute::B
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::A => "a",
            Attribute::B => "b",
        }
    }
}

impl std::fmt::Display for Attribute {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Attribute {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "a" | "A" => Ok(Attribute::A),
            "b" | "B" => Ok(Attribute::B),
            other => Err(format!("unknown attribute label {other:?}")),
        }
    }
}

/// Lower-cased lookup key for a surface form.
pub fn case_fold(word: &str) -> String {
    word.to_lowercase()
}

/// Collapses whitespace runs to single spaces and trims the ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Whether a token can be an attribute word at all: it must contain a letter.
pub fn is_word_like(token: &str) -> bool {
    token.chars().any(char::is_alphabetic)
}

fn is_punctuation(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    /// Whether whitespace preceded this token in the source text.
    pub space_before: bool,
    /// Span into the owning document's subtoken list.
    pub subtokens: Range<usize>,
}

/// Wordpiece-style tokenizer.
///
/// Words are split on whitespace and punctuation; every punctuation character
/// is its own word. With a vocabulary, each word is split greedily into the
/// longest matching pieces (continuations prefixed with `##`), matching
/// case-insensitively but keeping the original casing in the pieces. Words
/// that cannot be covered by the vocabulary, and every word in the fallback
/// mode, become a single subtoken.
#[derive(Debug, Clone, Default)]
pub struct Tokenizer {
    vocab: Option<HashSet<String>>,
}

impl Tokenizer {
    pub fn whitespace() -> Self {
        Self { vocab: None }
    }

    pub fn wordpiece<I, S>(vocab: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self { vocab: Some(vocab.into_iter().map(|s| case_fold(s.as_ref())).collect()) }
    }

    /// One piece per line, `##`-prefixed for continuations.
    pub fn from_vocab_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(Self::wordpiece(text.lines().map(str::trim).filter(|l| !l.is_empty())))
    }

    pub fn is_wordpiece(&self) -> bool {
        self.vocab.is_some()
    }

    /// Splits text into `(word, space_before)` pairs.
    pub fn pre_tokenize(text: &str) -> Vec<(String, bool)> {
        let mut out = Vec::new();
        let mut current = String::new();
        let mut current_space = false;
        let mut pending_space = false;
        for c in text.chars() {
            if c.is_whitespace() {
                if !current.is_empty() {
                    out.push((std::mem::take(&mut current), current_space));
                }
                pending_space = true;
            } else if is_punctuation(c) {
                if !current.is_empty() {
                    out.push((std::mem::take(&mut current), current_space));
                    pending_space = false;
                }
                out.push((c.to_string(), pending_space && !out.is_empty()));
                pending_space = false;
            } else {
                if current.is_empty() {
                    current_space = pending_space && !out.is_empty();
                    pending_space = false;
                }
                current.push(c);
            }
        }
        if !current.is_empty() {
            out.push((current, current_space));
        }
        out
    }

    /// Subtoken pieces for a single word.
    pub fn subtokens(&self, word: &str) -> Vec<String> {
        let Some(vocab) = &self.vocab else {
            return vec![word.to_string()];
        };
        let chars: Vec<char> = word.chars().collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let piece: String = chars[start..end].iter().collect();
                let key = if start == 0 {
                    case_fold(&piece)
                } else {
                    format!("{CONTINUATION}{}", case_fold(&piece))
                };
                if vocab.contains(&key) {
                    found = Some(if start == 0 { piece } else { format!("{CONTINUATION}{piece}") });
                    break;
                }
                end -= 1;
            }
            match found {
                Some(piece) => {
                    pieces.push(piece);
                    start = end;
                }
                None => return vec![word.to_string()],
            }
        }
        pieces
    }

    /// Tokenizes text into words plus a flat subtoken list.
    pub fn tokenize(&self, text: &str) -> (Vec<Token>, Vec<String>) {
        let mut tokens = Vec::new();
        let mut subtokens = Vec::new();
        for (word, space_before) in Self::pre_tokenize(text) {
            let pieces = self.subtokens(&word);
            let span = subtokens.len()..subtokens.len() + pieces.len();
            subtokens.extend(pieces);
            tokens.push(Token { text: word, space_before, subtokens: span });
        }
        (tokens, subtokens)
    }
}

/// Joins tokens back into text, inserting a single space where the source had whitespace.
pub fn detokenize<'a>(tokens: impl IntoIterator<Item = (&'a str, bool)>) -> String {
    let mut out = String::new();
    for (text, space_before) in tokens {
        if space_before && !out.is_empty() {
            out.push(' ');
        }
        out.push_str(text);
    }
    out
}

/// Merges `##` continuation subtokens into whole words.
pub fn merge_subtokens(pieces: &[String]) -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    for piece in pieces {
        match piece.strip_prefix(CONTINUATION) {
            Some(rest) if !words.is_empty() => words.last_mut().unwrap().push_str(rest),
            Some(rest) => words.push(rest.to_string()),
            None => words.push(piece.clone()),
        }
    }
    words
}

/// One JSONL corpus record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<Attribute>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl CorpusRecord {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into(), label: None, group: None, id: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub label: Option<i64>,
    pub group: Option<Attribute>,
    pub tokens: Vec<Token>,
    pub subtokens: Vec<String>,
}

impl Document {
    pub fn detokenize(&self) -> String {
        detokenize(self.tokens.iter().map(|t| (t.text.as_str(), t.space_before)))
    }

    pub fn is_single_subtoken(&self, token_index: usize) -> bool {
        self.tokens[token_index].subtokens.len() == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Plain,
}

impl std::str::FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "plain" | "txt" => Ok(CorpusFormat::Plain),
            other => Err(format!("unknown corpus format {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TokenizedCorpus {
    pub documents: Vec<Document>,
    pub tokenizer: Tokenizer,
}

/// A single appearance of a word together with its context window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occurrence {
    /// Case-folded surface form.
    pub word: String,
    pub doc_id: String,
    pub doc_index: usize,
    pub token_index: usize,
    pub context: Vec<String>,
    /// Index of the occurrence inside `context`.
    pub position: usize,
}

impl TokenizedCorpus {
    pub fn from_records(records: Vec<CorpusRecord>, tokenizer: Tokenizer) -> Self {
        let documents = records
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let (tokens, subtokens) = tokenizer.tokenize(&r.text);
                Document {
                    id: r.id.unwrap_or_else(|| format!("doc-{i}")),
                    text: r.text,
                    label: r.label,
                    group: r.group,
                    tokens,
                    subtokens,
                }
            })
            .collect();
        Self { documents, tokenizer }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.documents.iter().map(|d| d.tokens.len()).sum()
    }

    fn occurrence(&self, doc_index: usize, token_index: usize, window: usize) -> Occurrence {
        let doc = &self.documents[doc_index];
        let half = window / 2;
        let start = token_index.saturating_sub(half);
        let end = doc.tokens.len().min(token_index + (window - half)).max(token_index + 1);
        Occurrence {
            word: case_fold(&doc.tokens[token_index].text),
            doc_id: doc.id.clone(),
            doc_index,
            token_index,
            context: doc.tokens[start..end].iter().map(|t| t.text.clone()).collect(),
            position: token_index - start,
        }
    }

    /// All case-folded matches of `word`, in corpus order.
    pub fn find_occurrences(&self, word: &str, window: usize) -> Vec<Occurrence> {
        let key = case_fold(word);
        let mut out = Vec::new();
        for (d, doc) in self.documents.iter().enumerate() {
            for (t, tok) in doc.tokens.iter().enumerate() {
                if case_fold(&tok.text) == key {
                    out.push(self.occurrence(d, t, window));
                }
            }
        }
        out
    }

    /// Occurrences of every single-subtoken word, capped per word, keyed by case-folded form.
    pub fn index_single_subtoken_words(
        &self,
        window: usize,
        cap: usize,
    ) -> BTreeMap<String, Vec<Occurrence>> {
        let mut index: BTreeMap<String, Vec<Occurrence>> = BTreeMap::new();
        let mut multi: HashSet<String> = HashSet::new();
        for (d, doc) in self.documents.iter().enumerate() {
            for (t, tok) in doc.tokens.iter().enumerate() {
                let key = case_fold(&tok.text);
                if !doc.is_single_subtoken(t) {
                    multi.insert(key);
                    continue;
                }
                let slot = index.entry(key).or_default();
                if slot.len() < cap {
                    slot.push(self.occurrence(d, t, window));
                }
            }
        }
        index.retain(|w, _| !multi.contains(w));
        index
    }
}

fn parse_jsonl(path: &Path, text: &str) -> Result<Vec<CorpusRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        records.push(record);
    }
    Ok(records)
}

pub fn read_records(path: &Path, format: CorpusFormat) -> Result<Vec<CorpusRecord>> {
    let text = fs::read_to_string(path)?;
    let records = match format {
        CorpusFormat::Jsonl => parse_jsonl(path, &text)?,
        CorpusFormat::Plain => text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(CorpusRecord::new)
            .collect(),
    };
    if records.is_empty() {
        return Err(Error::EmptyCorpus(path.to_path_buf()));
    }
    Ok(records)
}

pub fn load_corpus(path: &Path, format: CorpusFormat, tokenizer: Tokenizer) -> Result<TokenizedCorpus> {
    Ok(TokenizedCorpus::from_records(read_records(path, format)?, tokenizer))
}
