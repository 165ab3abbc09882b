//! Dictionary substitution followed by mask-and-infill error correction.
//!
//! Substitution swaps attribute words in place. It leaves agreement errors
//! behind ("he taught herself"), so a discriminator scores every word in
//! context, implausible words are replaced by a single mask covering all
//! their subtokens, and an infiller proposes replacements. Substituted words
//! are protected by default so correction cannot undo the intervention.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{case_fold, detokenize, merge_subtokens, Document, TokenizedCorpus, Tokenizer};
use crate::dictionary::WordPairDictionary;
use crate::error::{Error, Result};
use crate::lm::NgramModel;

pub const MASK: &str = "<mask>";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Casing {
    Lower,
    Capitalized,
    Upper,
    /// Mixed or caseless; replacements are left as they come.
    Other,
}

pub fn casing_of(word: &str) -> Casing {
    let letters: Vec<char> = word.chars().filter(|c| c.is_alphabetic()).collect();
    if letters.is_empty() {
        return Casing::Other;
    }
    if letters.iter().all(|c| c.is_lowercase()) {
        Casing::Lower
    } else if letters.len() > 1 && letters.iter().all(|c| c.is_uppercase()) {
        Casing::Upper
    } else if letters[0].is_uppercase() && letters[1..].iter().all(|c| c.is_lowercase()) {
        Casing::Capitalized
    } else {
        Casing::Other
    }
}

pub fn apply_casing(word: &str, casing: Casing) -> String {
    match casing {
        Casing::Lower => word.to_lowercase(),
        Casing::Upper => word.to_uppercase(),
        Casing::Capitalized => {
            let lower = word.to_lowercase();
            let mut chars = lower.chars();
            match chars.next() {
                Some(first) => first.to_uppercase().chain(chars).collect(),
                None => lower,
            }
        }
        Casing::Other => word.to_string(),
    }
}

/// A word with its subtoken pieces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Word {
    pub text: String,
    pub space_before: bool,
    pub subtokens: Vec<String>,
}

impl Word {
    pub fn new(text: &str, space_before: bool, tokenizer: &Tokenizer) -> Self {
        Self { text: text.to_string(), space_before, subtokens: tokenizer.subtokens(text) }
    }
}

pub fn words_of(doc: &Document) -> Vec<Word> {
    doc.tokens
        .iter()
        .map(|t| Word { text: t.text.clone(), space_before: t.space_before, subtokens: doc.subtokens[t.subtokens.clone()].to_vec() })
        .collect()
}

pub fn words_from_text(text: &str, tokenizer: &Tokenizer) -> Vec<Word> {
    Tokenizer::pre_tokenize(text).into_iter().map(|(w, s)| Word::new(&w, s, tokenizer)).collect()
}

pub fn render(words: &[Word]) -> String {
    detokenize(words.iter().map(|w| (w.text.as_str(), w.space_before)))
}

fn subtoken_spans(words: &[Word]) -> Vec<Range<usize>> {
    let mut start = 0;
    words
        .iter()
        .map(|w| {
            let span = start..start + w.subtokens.len();
            start = span.end;
            span
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitution {
    pub token_index: usize,
    pub original: String,
    pub replacement: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSpan {
    pub token_index: usize,
    /// Subtoken span replaced by the mask, in the text being corrected.
    pub subtokens: Range<usize>,
    pub original: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Infill {
    pub token_index: usize,
    pub inserted: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteTrace {
    pub substitutions: Vec<Substitution>,
    pub masked_spans: Vec<MaskedSpan>,
    pub infills: Vec<Infill>,
    pub flags: Vec<String>,
}

/// Replaces every dictionary word by its counterpart, keeping the casing pattern.
pub fn substitute(words: &[Word], dict: &WordPairDictionary, tokenizer: &Tokenizer) -> (Vec<Word>, Vec<Substitution>) {
    let mut out = Vec::with_capacity(words.len());
    let mut subs = Vec::new();
    for (i, w) in words.iter().enumerate() {
        match dict.counterpart(&w.text) {
            Some(cf) => {
                let replacement = apply_casing(cf, casing_of(&w.text));
                subs.push(Substitution { token_index: i, original: w.text.clone(), replacement: replacement.clone() });
                out.push(Word::new(&replacement, w.space_before, tokenizer));
            }
            None => out.push(w.clone()),
        }
    }
    (out, subs)
}

/// Scores every word's plausibility in context.
pub trait DiscriminatorBackend: Send + Sync {
    fn name(&self) -> &str;
    fn deterministic(&self) -> bool;
    /// One score in `[0, 1]` per word.
    fn score(&self, words: &[String]) -> Result<Vec<f64>>;
}

/// Proposes replacements for a masked word.
pub trait InfillerBackend: Send + Sync {
    fn name(&self) -> &str;
    fn deterministic(&self) -> bool;
    /// Subtokens for the mask between `left` and `right`; `right` may contain further [`MASK`]s.
    fn infill(&self, left: &[String], right: &[String]) -> Result<Vec<String>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectionConfig {
    /// Words scoring strictly below this are masked.
    pub threshold_theta: f64,
    pub max_mask_fraction: f64,
    pub protect_substituted: bool,
    pub enabled: bool,
    /// Detect/mask/infill passes, 1 to 3.
    pub iterations: usize,
    /// Emit documents without substitutions (flagged as no-ops).
    pub include_no_op: bool,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            threshold_theta: 0.1,
            max_mask_fraction: 0.3,
            protect_substituted: true,
            enabled: true,
            iterations: 1,
            include_no_op: true,
        }
    }
}

pub const MAX_CORRECTION_ITERATIONS: usize = 3;

impl CorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.threshold_theta) {
            return Err(Error::Precondition(format!("theta must lie in [0, 1), got {}", self.threshold_theta)));
        }
        if !(0.0..=1.0).contains(&self.max_mask_fraction) {
            return Err(Error::Precondition(format!("max_mask_fraction must lie in [0, 1], got {}", self.max_mask_fraction)));
        }
        if !(1..=MAX_CORRECTION_ITERATIONS).contains(&self.iterations) {
            return Err(Error::Precondition(format!(
                "iterations must lie in 1..={MAX_CORRECTION_ITERATIONS}, got {}",
                self.iterations
            )));
        }
        Ok(())
    }
}

/// Indices scoring strictly below θ, skipping protected words, capped at
/// `floor(max_mask_fraction * n)` by keeping the lowest scores.
pub fn select_erratic(scores: &[f64], protected: &[bool], cfg: &CorrectionConfig) -> Vec<usize> {
    let mut flagged: Vec<usize> = (0..scores.len())
        .filter(|&i| scores[i] < cfg.threshold_theta)
        .filter(|&i| !(cfg.protect_substituted && protected.get(i).copied().unwrap_or(false)))
        .collect();
    let cap = (cfg.max_mask_fraction * scores.len() as f64 + 1e-9).floor() as usize;
    if flagged.len() > cap {
        flagged.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        flagged.truncate(cap);
        flagged.sort_unstable();
    }
    flagged
}

pub fn detect_erratic(
    words: &[Word],
    protected: &[bool],
    disc: &dyn DiscriminatorBackend,
    cfg: &CorrectionConfig,
) -> Result<Vec<usize>> {
    let texts: Vec<String> = words.iter().map(|w| w.text.clone()).collect();
    let scores = disc.score(&texts)?;
    if scores.len() != words.len() {
        return Err(Error::backend(disc.name(), format!("{} scores for {} words", scores.len(), words.len())));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::backend(disc.name(), format!("score {s} outside [0, 1]")));
    }
    Ok(select_erratic(&scores, protected, cfg))
}

/// Text with some words replaced by a single mask sentinel each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedText {
    pub origin: String,
    pub words: Vec<Word>,
    /// Masked word indices, ascending.
    pub masked: Vec<usize>,
    /// Surface forms the masks replaced.
    pub originals: Vec<String>,
}

impl MaskedText {
    pub fn subtokens(&self) -> Vec<String> {
        self.words.iter().flat_map(|w| w.subtokens.iter().cloned()).collect()
    }

    pub fn render(&self) -> String {
        render(&self.words)
    }
}

/// Replaces the whole subtoken group of each flagged word by one [`MASK`].
pub fn mask_subtoken_groups(words: &[Word], indices: &[usize], origin: &str) -> (MaskedText, Vec<MaskedSpan>) {
    let mut indices = indices.to_vec();
    indices.sort_unstable();
    indices.dedup();
    let spans = subtoken_spans(words);
    let mut masked_words = words.to_vec();
    let mut record = Vec::new();
    let mut originals = Vec::new();
    for &i in &indices {
        record.push(MaskedSpan { token_index: i, subtokens: spans[i].clone(), original: words[i].text.clone() });
        originals.push(words[i].text.clone());
        masked_words[i] = Word { text: MASK.into(), space_before: words[i].space_before, subtokens: vec![MASK.into()] };
    }
    (MaskedText { origin: origin.to_string(), words: masked_words, masked: indices, originals }, record)
}

/// Fills masks greedily left to right. Each mask becomes zero or more words.
/// Returns the new words, a per-word origin map into the masked text, and the infill record.
pub fn infill(
    masked: &MaskedText,
    gen: &dyn InfillerBackend,
    tokenizer: &Tokenizer,
) -> Result<(Vec<Word>, Vec<usize>, Vec<Infill>)> {
    let mut slots: Vec<Vec<Word>> = masked.words.iter().map(|w| vec![w.clone()]).collect();
    let mut record = Vec::new();
    for (&i, original) in masked.masked.iter().zip(&masked.originals) {
        let left: Vec<String> = slots[..i].iter().flatten().map(|w| w.text.clone()).collect();
        let right: Vec<String> = slots[i + 1..].iter().flatten().map(|w| w.text.clone()).collect();
        let pieces = gen.infill(&left, &right)?;
        let casing = casing_of(original);
        let space = masked.words[i].space_before;
        let new_words: Vec<Word> = merge_subtokens(&pieces)
            .into_iter()
            .enumerate()
            .map(|(j, w)| Word::new(&apply_casing(&w, casing), if j == 0 { space } else { true }, tokenizer))
            .collect();
        record.push(Infill { token_index: i, inserted: pieces });
        slots[i] = new_words;
    }
    let origin_map = slots.iter().enumerate().flat_map(|(i, s)| std::iter::repeat_n(i, s.len())).collect();
    Ok((slots.into_iter().flatten().collect(), origin_map, record))
}

/// Toy backends built from forward and backward trigram models of grammatical text.
///
/// The score of a word is the smaller of its left-context and right-context
/// probability relative to the best word in that context. Infilling picks the
/// word maximising the product of both directions.
#[derive(Debug, Clone)]
pub struct NgramCorrector {
    forward: NgramModel,
    backward: NgramModel,
}

pub const DEFAULT_NGRAM_BETA: f64 = 0.1;

impl NgramCorrector {
    pub fn train<S: AsRef<str>>(sentences: &[Vec<S>], beta: f64) -> Self {
        Self { forward: NgramModel::train(sentences, beta), backward: NgramModel::train_reversed(sentences, beta) }
    }

    pub fn from_corpus(corpus: &TokenizedCorpus, beta: f64) -> Self {
        let sentences: Vec<Vec<&str>> =
            corpus.documents.iter().map(|d| d.tokens.iter().map(|t| t.text.as_str()).collect()).collect();
        Self::train(&sentences, beta)
    }

    pub fn forward_model(&self) -> &NgramModel {
        &self.forward
    }

    /// Two-word history ending just before position `i`; boundary markers pad, masks are unknown.
    fn history(model: &NgramModel, seq: &[String], i: usize) -> (Option<u32>, Option<u32>) {
        let at = |j: isize| -> Option<u32> {
            if j < 0 {
                Some(model.id(crate::lm::BOS))
            } else if seq[j as usize] == MASK {
                None
            } else {
                Some(model.id(&seq[j as usize]))
            }
        };
        let (u, v) = (at(i as isize - 2), at(i as isize - 1));
        // an unknown nearer word hides the farther one
        if v.is_none() {
            (None, None)
        } else {
            (u, v)
        }
    }
}

impl DiscriminatorBackend for NgramCorrector {
    fn name(&self) -> &str {
        "toy-ngram"
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn score(&self, words: &[String]) -> Result<Vec<f64>> {
        let reversed: Vec<String> = words.iter().rev().cloned().collect();
        let n = words.len();
        Ok((0..n)
            .map(|i| {
                let (u, v) = Self::history(&self.forward, words, i);
                let left = self.forward.relative_prob(self.forward.id(&words[i]), u, v);
                let r = n - 1 - i;
                let (u, v) = Self::history(&self.backward, &reversed, r);
                let right = self.backward.relative_prob(self.backward.id(&reversed[r]), u, v);
                left.min(right)
            })
            .collect())
    }
}

impl InfillerBackend for NgramCorrector {
    fn name(&self) -> &str {
        "toy-ngram"
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn infill(&self, left: &[String], right: &[String]) -> Result<Vec<String>> {
        let mut seq: Vec<String> = left.to_vec();
        seq.push(MASK.into());
        let (lu, lv) = Self::history(&self.forward, &seq, left.len());
        let mut rev: Vec<String> = right.iter().rev().cloned().collect();
        rev.push(MASK.into());
        let (ru, rv) = Self::history(&self.backward, &rev, right.len());
        let mut best: Option<(f64, &str)> = None;
        for id in self.forward.candidate_ids() {
            let word = self.forward.word(id);
            let p = self.forward.prob_id(id, lu, lv) * self.backward.prob_id(self.backward.id(word), ru, rv);
            let better = match best {
                None => true,
                Some((bp, bw)) => p > bp || (p == bp && word < bw),
            };
            if better {
                best = Some((p, word));
            }
        }
        match best {
            Some((_, w)) => Ok(vec![w.to_string()]),
            None => Err(Error::backend("toy-ngram", "empty vocabulary")),
        }
    }
}

/// One source/target pair of the parallel corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub id: String,
    pub src: String,
    pub tgt: String,
    /// No word was substituted.
    #[serde(default)]
    pub no_op: bool,
    pub trace: RewriteTrace,
}

/// Optional correction backends.
#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub discriminator: &'a dyn DiscriminatorBackend,
    pub infiller: &'a dyn InfillerBackend,
}

/// Runs detect/mask/infill passes on substituted words.
pub fn correct(
    mut words: Vec<Word>,
    mut protected: Vec<bool>,
    backends: Backends<'_>,
    tokenizer: &Tokenizer,
    cfg: &CorrectionConfig,
    origin: &str,
    trace: &mut RewriteTrace,
) -> Result<Vec<Word>> {
    for _ in 0..cfg.iterations {
        let flagged = detect_erratic(&words, &protected, backends.discriminator, cfg)?;
        if flagged.is_empty() {
            break;
        }
        let (masked, spans) = mask_subtoken_groups(&words, &flagged, origin);
        let (filled, origin_map, infills) = infill(&masked, backends.infiller, tokenizer)?;
        trace.masked_spans.extend(spans);
        trace.infills.extend(infills);
        protected = origin_map.iter().map(|&i| protected[i] && !masked.masked.contains(&i)).collect();
        words = filled;
    }
    Ok(words)
}

/// Substitutes and (optionally) corrects one document.
pub fn rewrite_document(
    doc: &Document,
    dict: &WordPairDictionary,
    tokenizer: &Tokenizer,
    backends: Option<Backends<'_>>,
    cfg: &CorrectionConfig,
) -> ParallelPair {
    let words = words_of(doc);
    let src = render(&words);
    let (substituted, subs) = substitute(&words, dict, tokenizer);
    let mut trace = RewriteTrace { substitutions: subs, ..Default::default() };
    let no_op = trace.substitutions.is_empty();
    let mut tgt_words = substituted;
    if let (true, false, Some(b)) = (cfg.enabled, no_op, backends) {
        let mut protected = vec![false; tgt_words.len()];
        for s in &trace.substitutions {
            protected[s.token_index] = true;
        }
        let mut attempt = trace.clone();
        match correct(tgt_words.clone(), protected, b, tokenizer, cfg, &doc.id, &mut attempt) {
            Ok(corrected) => {
                trace = attempt;
                tgt_words = corrected;
            }
            Err(e) => {
                log::warn!("correction skipped for {}: {e}", doc.id);
                trace.flags.push(format!("correction skipped: {e}"));
            }
        }
    }
    if no_op {
        trace.flags.push("no-op".into());
    }
    ParallelPair { id: doc.id.clone(), src, tgt: render(&tgt_words), no_op, trace }
}

/// One pair per document in corpus order; no-op documents are dropped unless
/// `cfg.include_no_op` is set.
pub fn build_parallel_corpus(
    corpus: &TokenizedCorpus,
    dict: &WordPairDictionary,
    backends: Option<Backends<'_>>,
    cfg: &CorrectionConfig,
) -> Result<Vec<ParallelPair>> {
    cfg.validate()?;
    let pairs: Vec<ParallelPair> = corpus
        .documents
        .par_iter()
        .map(|doc| rewrite_document(doc, dict, &corpus.tokenizer, backends, cfg))
        .collect();
    Ok(pairs.into_iter().filter(|p| cfg.include_no_op || !p.no_op).collect())
}

pub fn write_parallel_jsonl(w: &mut impl std::io::Write, pairs: &[ParallelPair]) -> Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut *w, p)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_parallel_jsonl(path: &std::path::Path) -> Result<Vec<ParallelPair>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, i + 1, e.to_string())))
        .collect()
}

/// Case-folded word sequence of a text, as used by the word-level models.
pub fn word_sequence(text: &str) -> Vec<String> {
    Tokenizer::pre_tokenize(text).into_iter().map(|(w, _)| case_fold(&w)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusRecord;
    use crate::dictionary::{Entry, Source};

    fn dict(pairs: &[(&str, &str)]) -> WordPairDictionary {
        WordPairDictionary::from_entries(pairs.iter().map(|(a, b)| Entry::new(a, b, Source::Prompt)))
    }

    fn text(words: &[Word]) -> String {
        render(words)
    }

    #[test]
    fn casing_patterns() {
        assert_eq!(apply_casing("he", casing_of("She")), "He");
        assert_eq!(apply_casing("he", casing_of("SHE")), "HE");
        assert_eq!(apply_casing("he", casing_of("she")), "he");
        assert_eq!(casing_of("I"), Casing::Capitalized);
        assert_eq!(casing_of("McDonald"), Casing::Other);
    }

    #[test]
    fn nurse_example() {
        let tok = Tokenizer::whitespace();
        let (out, subs) = substitute(&words_from_text("She is a nurse", &tok), &dict(&[("she", "he")]), &tok);
        assert_eq!(text(&out), "He is a nurse");
        assert_eq!(subs, vec![Substitution { token_index: 0, original: "She".into(), replacement: "He".into() }]);
    }

    #[test]
    fn missing_pair_leaves_reflexive() {
        let tok = Tokenizer::whitespace();
        let src = "She was teaching herself some Python.";
        let (out, _) = substitute(&words_from_text(src, &tok), &dict(&[("she", "he")]), &tok);
        assert_eq!(text(&out), "He was teaching herself some Python.");
        let (same, subs) = substitute(&words_from_text(src, &tok), &WordPairDictionary::new(), &tok);
        assert_eq!(text(&same), src);
        assert!(subs.is_empty());
    }

    #[test]
    fn duchesses_mask() {
        let tok = Tokenizer::wordpiece(["the", "men", "are", "duchess", "##es"]);
        let words = words_from_text("The men are duchesses", &tok);
        let (masked, spans) = mask_subtoken_groups(&words, &[3], "d");
        assert_eq!(masked.subtokens(), vec!["The", "men", "are", MASK]);
        assert_eq!(spans[0].subtokens, 3..5);
        let (none, _) = mask_subtoken_groups(&words, &[], "d");
        assert_eq!(none.words, words);
    }

    #[test]
    fn adjacent_masks_stay_separate() {
        let tok = Tokenizer::whitespace();
        let words = words_from_text("a b c d", &tok);
        let (masked, _) = mask_subtoken_groups(&words, &[1, 2], "d");
        assert_eq!(masked.subtokens(), vec!["a", MASK, MASK, "d"]);
    }

    struct Fixed(Vec<String>);

    impl InfillerBackend for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn deterministic(&self) -> bool {
            true
        }
        fn infill(&self, _: &[String], _: &[String]) -> Result<Vec<String>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn multi_subtoken_infill_forms_one_word() {
        let tok = Tokenizer::wordpiece(["the", "men", "are", "duchess", "##es", "dukes"]);
        let words = words_from_text("The men are dukes", &tok);
        let (masked, _) = mask_subtoken_groups(&words, &[3], "d");
        let gen = Fixed(vec!["duchess".into(), "##es".into()]);
        let (filled, map, _) = infill(&masked, &gen, &tok).unwrap();
        assert_eq!(render(&filled), "The men are duchesses");
        assert_eq!(filled[3].subtokens, vec!["duchess", "##es"]);
        assert_eq!(map, vec![0, 1, 2, 3]);

        let (empty, map, _) = infill(&masked, &Fixed(vec![]), &tok).unwrap();
        assert_eq!(render(&empty), "The men are");
        assert_eq!(map, vec![0, 1, 2]);
    }

    #[test]
    fn theta_zero_flags_nothing_and_cap_applies() {
        let cfg = CorrectionConfig { threshold_theta: 0.0, ..Default::default() };
        assert!(select_erratic(&[0.0, 0.5, 0.0], &[false; 3], &cfg).is_empty());
        let cfg = CorrectionConfig::default();
        let scores = [0.05, 0.01, 0.09, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5];
        assert_eq!(select_erratic(&scores, &[false; 10], &cfg), vec![0, 1, 2]);
        assert_eq!(select_erratic(&scores[..7], &[false; 7], &cfg), vec![0, 1]);
        let protected = [false, true, false, false, false, false, false, false, false, false];
        assert_eq!(select_erratic(&scores, &protected, &cfg), vec![0, 2]);
    }

    fn grammar() -> Vec<Vec<String>> {
        let mut out = Vec::new();
        for (subj, refl) in [("she", "herself"), ("he", "himself")] {
            for topic in ["python", "music", "art"] {
                out.push(format!("{subj} taught {refl} some {topic} .").split(' ').map(String::from).collect());
            }
        }
        out
    }

    #[test]
    fn ngram_corrector_fixes_reflexive() {
        let corr = NgramCorrector::train(&grammar(), DEFAULT_NGRAM_BETA);
        let tok = Tokenizer::whitespace();
        let corpus = TokenizedCorpus::from_records(vec![CorpusRecord::new("She taught herself some art .")], tok.clone());
        let d = dict(&[("she", "he")]);
        let backends = Backends { discriminator: &corr, infiller: &corr };
        let cfg = CorrectionConfig::default();
        let pair = rewrite_document(&corpus.documents[0], &d, &tok, Some(backends), &cfg);
        assert_eq!(pair.tgt, "He taught himself some art .");
        assert_eq!(pair.trace.masked_spans.len(), 1);
        assert_eq!(pair.trace.masked_spans[0].original, "herself");

        let off = CorrectionConfig { enabled: false, ..Default::default() };
        let raw = rewrite_document(&corpus.documents[0], &d, &tok, Some(backends), &off);
        assert_eq!(raw.tgt, "He taught herself some art .");
    }

    #[test]
    fn no_op_documents_are_flagged() {
        let tok = Tokenizer::whitespace();
        let corpus = TokenizedCorpus::from_records(
            vec![CorpusRecord::new("she sings"), CorpusRecord::new("the cat"), CorpusRecord::new("he runs")],
            tok,
        );
        let d = dict(&[("she", "he")]);
        let cfg = CorrectionConfig::default();
        let pairs = build_parallel_corpus(&corpus, &d, None, &cfg).unwrap();
        assert_eq!(pairs.iter().filter(|p| !p.no_op).count(), 2);
        assert!(pairs[1].no_op);
        let excluded = CorrectionConfig { include_no_op: false, ..cfg };
        assert_eq!(build_parallel_corpus(&corpus, &d, None, &excluded).unwrap().len(), 2);
    }

    #[test]
    fn jsonl_round_trip() {
        let tok = Tokenizer::whitespace();
        let corpus = TokenizedCorpus::from_records(vec![CorpusRecord::new("she sings")], tok);
        let pairs = build_parallel_corpus(&corpus, &dict(&[("she", "he")]), None, &CorrectionConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_parallel_jsonl(&mut buf, &pairs).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert!(line.contains("\"src\":\"she sings\"") && line.contains("\"tgt\":\"he sings\""));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        std::fs::write(&path, buf).unwrap();
        assert_eq!(read_parallel_jsonl(&path).unwrap(), pairs);
    }
}
