//! Bidirectional word-pair dictionaries.
//!
//! Every covered word appears in exactly one entry, so lookups work in both
//! directions and a pair `(a, b)` doubles as its mirror `(b, a)`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{case_fold, Attribute};
use crate::error::{Error, Result};
use crate::flow::PairCandidate;
use crate::subspace::PromptPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Prompt,
    Discovered,
    Name,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Prompt => "prompt",
            Source::Discovered => "discovered",
            Source::Name => "name",
        }
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "prompt" => Ok(Source::Prompt),
            "discovered" => Ok(Source::Discovered),
            "name" => Ok(Source::Name),
            other => Err(format!("unknown source {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Entry {
    pub word_a: String,
    pub word_b: String,
    pub source: Source,
    /// `(votes, total)` from majority voting.
    pub votes: Option<(usize, usize)>,
}

impl Entry {
    pub fn new(word_a: &str, word_b: &str, source: Source) -> Self {
        Self { word_a: case_fold(word_a), word_b: case_fold(word_b), source, votes: None }
    }

    pub fn with_votes(mut self, votes: usize, total: usize) -> Self {
        self.votes = Some((votes, total));
        self
    }

    fn vote_fraction(&self) -> f64 {
        match self.votes {
            Some((v, t)) if t > 0 => v as f64 / t as f64,
            _ => 0.0,
        }
    }

    fn canonical_key(&self) -> (Source, &str, &str) {
        (self.source, &self.word_a, &self.word_b)
    }
}

/// Why an entry was not inserted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rejection {
    SelfPair,
    /// Identical pair already present.
    Duplicate,
    /// One of the words is already paired with something else.
    Conflict { existing: Entry },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WordPairDictionary {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeReport {
    pub added: usize,
    pub duplicates: usize,
    pub conflicts: Vec<(Entry, Entry)>,
}

impl WordPairDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = Entry>) -> Self {
        let mut d = Self::new();
        for e in entries {
            let _ = d.insert(e);
        }
        d
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn contains_word(&self, word: &str) -> bool {
        self.index.contains_key(&case_fold(word))
    }

    /// Counterpart of `word` in either direction (case-insensitive).
    pub fn counterpart(&self, word: &str) -> Option<&str> {
        let key = case_fold(word);
        let e = &self.entries[*self.index.get(&key)?];
        Some(if e.word_a == key { &e.word_b } else { &e.word_a })
    }

    pub fn insert(&mut self, entry: Entry) -> std::result::Result<(), Rejection> {
        let entry = Entry { word_a: case_fold(&entry.word_a), word_b: case_fold(&entry.word_b), ..entry };
        if entry.word_a == entry.word_b {
            return Err(Rejection::SelfPair);
        }
        let hit = self.index.get(&entry.word_a).or_else(|| self.index.get(&entry.word_b));
        if let Some(&i) = hit {
            let existing = &self.entries[i];
            let same = (existing.word_a == entry.word_a && existing.word_b == entry.word_b)
                || (existing.word_a == entry.word_b && existing.word_b == entry.word_a);
            return Err(if same { Rejection::Duplicate } else { Rejection::Conflict { existing: existing.clone() } });
        }
        let i = self.entries.len();
        self.index.insert(entry.word_a.clone(), i);
        self.index.insert(entry.word_b.clone(), i);
        self.entries.push(entry);
        Ok(())
    }

    /// Checks that no word is covered twice and no entry pairs a word with itself.
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.word_a == e.word_b {
                return Err(Error::Precondition(format!("self pair {:?}", e.word_a)));
            }
            for w in [&e.word_a, &e.word_b] {
                if let Some(j) = seen.insert(w, i) {
                    return Err(Error::Precondition(format!("word {w:?} appears in entries {j} and {i}")));
                }
            }
        }
        Ok(())
    }

    /// Entries in canonical order: prompt < discovered < name, then lexicographic.
    pub fn canonical_entries(&self) -> Vec<&Entry> {
        let mut out: Vec<&Entry> = self.entries.iter().collect();
        out.sort_by(|a, b| a.canonical_key().cmp(&b.canonical_key()));
        out
    }

    /// Union where `self` wins every conflict.
    pub fn merge(&self, extra: &WordPairDictionary) -> (WordPairDictionary, MergeReport) {
        let mut merged = self.clone();
        let mut report = MergeReport::default();
        for e in &extra.entries {
            match merged.insert(e.clone()) {
                Ok(()) => report.added += 1,
                Err(Rejection::Duplicate) => report.duplicates += 1,
                Err(Rejection::Conflict { existing }) => {
                    log::info!("merge conflict: kept {}-{} over {}-{}", existing.word_a, existing.word_b, e.word_a, e.word_b);
                    report.conflicts.push((existing, e.clone()));
                }
                Err(Rejection::SelfPair) => {}
            }
        }
        (merged, report)
    }

    pub fn write_tsv(&self, w: &mut impl Write) -> Result<()> {
        for e in self.canonical_entries() {
            let (votes, total) = match e.votes {
                Some((v, t)) => (v.to_string(), t.to_string()),
                None => (String::new(), String::new()),
            };
            writeln!(w, "{}\t{}\t{}\t{}\t{}", e.word_a, e.word_b, e.source.as_str(), votes, total)?;
        }
        Ok(())
    }

    pub fn to_tsv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("entries are UTF-8")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_atomic(path, |w| self.write_tsv(w))
    }

    /// Parses TSV; `path` is only used in error messages.
    pub fn parse_tsv(reader: impl BufRead, path: &Path) -> Result<Self> {
        let mut d = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let entry = match cols.as_slice() {
                [a, b] => Entry::new(a, b, Source::Prompt),
                [a, b, source] | [a, b, source, _, _] if cols.len() != 4 => {
                    let source = source.parse().map_err(|m| Error::parse(path, lineno, m))?;
                    let mut e = Entry::new(a, b, source);
                    if let [_, _, _, v, t] = cols.as_slice() {
                        if !(v.is_empty() && t.is_empty()) {
                            let v = v.parse().map_err(|_| Error::parse(path, lineno, format!("bad vote count {v:?}")))?;
                            let t = t.parse().map_err(|_| Error::parse(path, lineno, format!("bad total {t:?}")))?;
                            e = e.with_votes(v, t);
                        }
                    }
                    e
                }
                _ => return Err(Error::parse(path, lineno, format!("expected 2, 3 or 5 columns, got {}", cols.len()))),
            };
            if entry.word_a.is_empty() || entry.word_b.is_empty() {
                return Err(Error::parse(path, lineno, "empty word"));
            }
            match d.insert(entry) {
                Ok(()) | Err(Rejection::Duplicate) => {}
                Err(Rejection::SelfPair) => return Err(Error::parse(path, lineno, "self pair")),
                Err(Rejection::Conflict { existing }) => {
                    return Err(Error::parse(
                        path,
                        lineno,
                        format!("word already paired in {}-{}", existing.word_a, existing.word_b),
                    ))
                }
            }
        }
        Ok(d)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::parse_tsv(BufReader::new(file), path)
    }
}

impl fmt::Display for WordPairDictionary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_tsv_string())
    }
}

pub const DEFAULT_MIN_VOTES: f64 = 0.5;

/// Orients a candidate as `(group a word, group b word)`.
fn oriented(c: &PairCandidate) -> Entry {
    let (a, b) = match c.side {
        Attribute::A => (&c.word, &c.counterfactual),
        Attribute::B => (&c.counterfactual, &c.word),
    };
    Entry::new(a, b, Source::Discovered).with_votes(c.votes, c.total)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssemblyReport {
    pub below_threshold: Vec<PairCandidate>,
    /// `(kept, dropped)`.
    pub conflicts: Vec<(Entry, Entry)>,
    /// Candidates that were merged with their mirror pair.
    pub mirrored: usize,
}

/// Builds the dictionary from the prompt and majority-voted candidates.
///
/// Candidates below `min_votes` are dropped. The survivors are inserted in
/// descending vote fraction (then vote count, then lexicographically), so a
/// conflicting lower-vote pair loses; the prompt pair is inserted first and
/// always wins.
pub fn assemble(prompt: &PromptPair, candidates: &[PairCandidate], min_votes: f64) -> (WordPairDictionary, AssemblyReport) {
    let mut dict = WordPairDictionary::new();
    let mut report = AssemblyReport::default();
    dict.insert(Entry::new(&prompt.word_a, &prompt.word_b, Source::Prompt)).expect("prompt pair is valid");

    let mut kept: Vec<Entry> = Vec::new();
    for c in candidates {
        let fraction = if c.total > 0 { c.votes as f64 / c.total as f64 } else { 0.0 };
        if fraction >= min_votes {
            kept.push(oriented(c));
        } else {
            report.below_threshold.push(c.clone());
        }
    }
    kept.sort_by(|x, y| {
        y.vote_fraction()
            .total_cmp(&x.vote_fraction())
            .then_with(|| y.votes.cmp(&x.votes))
            .then_with(|| (&x.word_a, &x.word_b).cmp(&(&y.word_a, &y.word_b)))
    });
    for e in kept {
        match dict.insert(e.clone()) {
            Ok(()) | Err(Rejection::SelfPair) => {}
            Err(Rejection::Duplicate) => report.mirrored += 1,
            Err(Rejection::Conflict { existing }) => {
                log::info!(
                    "dictionary conflict: kept {}-{} ({:?}) over {}-{}",
                    existing.word_a,
                    existing.word_b,
                    existing.source,
                    e.word_a,
                    e.word_b
                );
                report.conflicts.push((existing, e));
            }
        }
    }
    (dict, report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameFrequency {
    pub name: String,
    pub frequency: u64,
    pub group: Attribute,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NameFrequencyList {
    pub names: Vec<NameFrequency>,
}

impl NameFrequencyList {
    pub fn new(names: Vec<NameFrequency>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert((n.group, case_fold(&n.name))) {
                return Err(Error::Precondition(format!("duplicate name {:?} in group {}", n.name, n.group)));
            }
        }
        Ok(Self { names })
    }

    /// Names of `group` ranked by descending frequency, ties lexicographic.
    pub fn ranked(&self, group: Attribute) -> Vec<&NameFrequency> {
        let mut out: Vec<&NameFrequency> = self.names.iter().filter(|n| n.group == group).collect();
        out.sort_by(|x, y| y.frequency.cmp(&x.frequency).then_with(|| x.name.cmp(&y.name)));
        out
    }

    /// TSV `name<TAB>frequency<TAB>group`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut names = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [name, freq, group] = cols.as_slice() else {
                return Err(Error::parse(path, i + 1, format!("expected 3 columns, got {}", cols.len())));
            };
            let frequency = freq.parse().map_err(|_| Error::parse(path, i + 1, format!("bad frequency {freq:?}")))?;
            let group = group.parse().map_err(|m: String| Error::parse(path, i + 1, m))?;
            names.push(NameFrequency { name: name.to_string(), frequency, group });
        }
        Self::new(names)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_atomic(path, |w| {
            for n in &self.names {
                writeln!(w, "{}\t{}\t{}", n.name, n.frequency, n.group)?;
            }
            Ok(())
        })
    }
}

/// Pairs the i-th most frequent name of group a with the i-th of group b.
pub fn names_intervention(list_a: &NameFrequencyList, list_b: &NameFrequencyList) -> WordPairDictionary {
    let a = list_a.ranked(Attribute::A);
    let b = list_b.ranked(Attribute::B);
    WordPairDictionary::from_entries(a.iter().zip(&b).map(|(x, y)| Entry::new(&x.name, &y.name, Source::Name)))
}

/// Same as [`names_intervention`] for a single list holding both groups.
pub fn names_from_list(list: &NameFrequencyList) -> WordPairDictionary {
    names_intervention(list, list)
}

/// Per-source entry counts, for reports.
pub fn source_counts(dict: &WordPairDictionary) -> BTreeMap<&'static str, usize> {
    let mut out = BTreeMap::new();
    for e in dict.entries() {
        *out.entry(e.source.as_str()).or_default() += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(word: &str, cf: &str, votes: usize, total: usize, side: Attribute) -> PairCandidate {
        PairCandidate { word: word.into(), counterfactual: cf.into(), votes, total, side }
    }

    fn prompt() -> PromptPair {
        PromptPair::new("she", "he").unwrap()
    }

    #[test]
    fn threshold_and_prompt() {
        let (d, report) = assemble(
            &prompt(),
            &[
                cand("she", "he", 9, 10, Attribute::A),
                cand("woman", "man", 6, 10, Attribute::A),
                cand("aunt", "uncle", 2, 10, Attribute::A),
            ],
            0.5,
        );
        assert_eq!(d.len(), 2);
        assert_eq!(d.counterpart("woman"), Some("man"));
        assert_eq!(d.counterpart("MAN"), Some("woman"));
        assert!(d.counterpart("aunt").is_none());
        assert_eq!(report.below_threshold.len(), 1);
        assert_eq!(d.entries()[0].source, Source::Prompt);
    }

    #[test]
    fn higher_vote_pair_wins_conflict() {
        let (d, report) = assemble(
            &prompt(),
            &[cand("her", "his", 5, 10, Attribute::A), cand("her", "him", 7, 10, Attribute::A)],
            0.5,
        );
        assert_eq!(d.counterpart("her"), Some("him"));
        assert_eq!(report.conflicts.len(), 1);
    }

    #[test]
    fn prompt_beats_discovered() {
        let (d, report) = assemble(&prompt(), &[cand("she", "him", 10, 10, Attribute::A)], 0.5);
        assert_eq!(d.counterpart("she"), Some("he"));
        assert_eq!(report.conflicts[0].0.source, Source::Prompt);
    }

    #[test]
    fn mirrored_candidates_collapse() {
        let (d, report) = assemble(
            &prompt(),
            &[cand("woman", "man", 8, 10, Attribute::A), cand("man", "woman", 9, 10, Attribute::B)],
            0.5,
        );
        assert_eq!(d.len(), 2);
        assert_eq!(report.mirrored, 1);
        let e = d.entries().iter().find(|e| e.word_a == "woman").unwrap();
        assert_eq!((e.word_b.as_str(), e.votes), ("man", Some((9, 10))));
    }

    #[test]
    fn names_by_rank() {
        let list = NameFrequencyList::new(vec![
            NameFrequency { name: "Anna".into(), frequency: 100, group: Attribute::A },
            NameFrequency { name: "Mary".into(), frequency: 50, group: Attribute::A },
            NameFrequency { name: "Peter".into(), frequency: 40, group: Attribute::B },
            NameFrequency { name: "John".into(), frequency: 90, group: Attribute::B },
        ])
        .unwrap();
        let d = names_from_list(&list);
        assert_eq!(d.counterpart("anna"), Some("john"));
        assert_eq!(d.counterpart("mary"), Some("peter"));
        assert!(names_intervention(&list, &NameFrequencyList::default()).is_empty());
    }

    #[test]
    fn duplicate_names_rejected() {
        let n = NameFrequency { name: "Anna".into(), frequency: 1, group: Attribute::A };
        assert!(NameFrequencyList::new(vec![n.clone(), n]).is_err());
    }

    #[test]
    fn merge_base_wins() {
        let base = WordPairDictionary::from_entries([Entry::new("she", "he", Source::Prompt)]);
        let extra = WordPairDictionary::from_entries([
            Entry::new("she", "him", Source::Discovered),
            Entry::new("anna", "john", Source::Name),
        ]);
        let (m, report) = base.merge(&extra);
        assert_eq!(m.len(), 2);
        assert_eq!(m.counterpart("she"), Some("he"));
        assert_eq!(report.conflicts.len(), 1);
        assert_eq!(report.added, 1);
    }

    #[test]
    fn tsv_round_trip_and_errors() {
        let d = WordPairDictionary::from_entries([
            Entry::new("woman", "man", Source::Discovered).with_votes(6, 10),
            Entry::new("anna", "john", Source::Name),
            Entry::new("she", "he", Source::Prompt),
        ]);
        let text = d.to_tsv_string();
        assert!(text.starts_with("she\the\tprompt\t\t\n"));
        let back = WordPairDictionary::parse_tsv(text.as_bytes(), Path::new("d.tsv")).unwrap();
        assert_eq!(back.to_tsv_string(), text);
        assert_eq!(back.counterpart("woman"), Some("man"));

        let err = WordPairDictionary::parse_tsv("she\the\tprompt\t\t\nlonely\n".as_bytes(), Path::new("d.tsv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }
}
