//! Evaluation: fluency, attribute transfer, group fairness, task scores and
//! bias-inducing subsampling.

use std::collections::BTreeMap;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{case_fold, Attribute, Occurrence, Tokenizer};
use crate::embedding::EmbeddingBackend;
use crate::error::{Error, Result};
use crate::lm::{self, LanguageModel};
use crate::rewrite::word_sequence;
use crate::subspace::{train_classifier, ClassifierConfig, SubspaceClassifier};

/// Token-pooled perplexity of raw texts.
pub fn perplexity(texts: &[String], lm: &dyn LanguageModel) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::Precondition("perplexity needs at least one text".into()));
    }
    let seqs: Vec<Vec<String>> = texts.iter().map(|t| word_sequence(t)).collect();
    lm::perplexity(lm, &seqs)
}

/// Assigns attribute probabilities `[P(a), P(b)]` to a text.
pub trait AttributeClassifier: Send + Sync {
    fn probabilities(&self, text: &str) -> Result<[f64; 2]>;
}

/// Classifier over mean-pooled contextual embeddings of all words in a text.
pub struct TextAttributeClassifier<B: EmbeddingBackend> {
    pub backend: B,
    pub classifier: SubspaceClassifier,
}

/// Mean of the contextual embeddings of every word of `text`, each seen in the full text.
pub fn pooled_embedding(backend: &dyn EmbeddingBackend, text: &str) -> Result<Vec<f64>> {
    let words: Vec<String> = Tokenizer::pre_tokenize(text).into_iter().map(|(w, _)| w).collect();
    let mut mean = vec![0.0; backend.dim()];
    if words.is_empty() {
        return Ok(mean);
    }
    for (i, w) in words.iter().enumerate() {
        let occ = Occurrence {
            word: case_fold(w),
            doc_id: String::new(),
            doc_index: 0,
            token_index: i,
            context: words.clone(),
            position: i,
        };
        let e = backend.embed(&occ)?;
        mean.iter_mut().zip(&e.vector).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= words.len() as f64);
    Ok(mean)
}

impl<B: EmbeddingBackend> TextAttributeClassifier<B> {
    /// Trains on group-labelled texts.
    pub fn train(backend: B, texts: &[(String, Attribute)], config: &ClassifierConfig) -> Result<Self> {
        let pooled = texts
            .par_iter()
            .map(|(t, g)| Ok((pooled_embedding(&backend, t)?, *g)))
            .collect::<Result<Vec<_>>>()?;
        let (a, b): (Vec<_>, Vec<_>) = pooled.into_iter().partition(|(_, g)| *g == Attribute::A);
        let a: Vec<Vec<f64>> = a.into_iter().map(|(v, _)| v).collect();
        let b: Vec<Vec<f64>> = b.into_iter().map(|(v, _)| v).collect();
        let classifier = train_classifier(&a, &b, config)?;
        Ok(Self { backend, classifier })
    }
}

impl<B: EmbeddingBackend> AttributeClassifier for TextAttributeClassifier<B> {
    fn probabilities(&self, text: &str) -> Result<[f64; 2]> {
        self.classifier.probabilities(&pooled_embedding(&self.backend, text)?)
    }
}

/// Mean of `1 - p` over per-instance probabilities of the original attribute.
pub fn transfer_accuracy_from_probs(p_original: &[f64]) -> Result<f64> {
    if p_original.is_empty() {
        return Err(Error::UndefinedMetric("transfer accuracy of an empty set".into()));
    }
    Ok(p_original.iter().map(|p| 1.0 - p).sum::<f64>() / p_original.len() as f64)
}

/// `mean(1 - P(original attribute | counterfactual))`, where the original
/// attribute is the classifier's decision on the original text.
pub fn transfer_accuracy(originals: &[String], counterfactuals: &[String], clf: &dyn AttributeClassifier) -> Result<f64> {
    if originals.len() != counterfactuals.len() {
        return Err(Error::LengthMismatch(format!(
            "{} originals but {} counterfactuals",
            originals.len(),
            counterfactuals.len()
        )));
    }
    let probs = originals
        .par_iter()
        .zip(counterfactuals)
        .map(|(o, c)| {
            let po = clf.probabilities(o)?;
            let original = if po[0] >= po[1] { 0 } else { 1 };
            Ok(clf.probabilities(c)?[original])
        })
        .collect::<Result<Vec<f64>>>()?;
    transfer_accuracy_from_probs(&probs)
}

/// Confusion counts for one group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub true_positives: u64,
    pub false_negatives: u64,
    pub false_positives: u64,
    pub true_negatives: u64,
}

impl GroupCounts {
    pub fn positives(&self) -> u64 {
        self.true_positives + self.false_negatives
    }

    pub fn negatives(&self) -> u64 {
        self.false_positives + self.true_negatives
    }

    pub fn total(&self) -> u64 {
        self.positives() + self.negatives()
    }
}

/// Exact non-negative fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fraction {
    pub numer: u64,
    pub denom: u64,
}

impl Fraction {
    fn from_ratio(r: Ratio<u64>) -> Self {
        Self { numer: *r.numer(), denom: *r.denom() }
    }

    pub fn value(&self) -> f64 {
        self.numer as f64 / self.denom as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub tprd: f64,
    pub fprd: f64,
    pub tprd_exact: Fraction,
    pub fprd_exact: Fraction,
    pub accuracy: f64,
    pub f1: f64,
    pub group_a: GroupCounts,
    pub group_b: GroupCounts,
}

fn check_lengths(predictions: &[bool], labels: &[bool], groups: Option<&[Attribute]>) -> Result<()> {
    if predictions.len() != labels.len() || groups.is_some_and(|g| g.len() != labels.len()) {
        return Err(Error::LengthMismatch(format!(
            "{} predictions, {} labels, {} groups",
            predictions.len(),
            labels.len(),
            groups.map_or(labels.len(), <[Attribute]>::len)
        )));
    }
    Ok(())
}

fn abs_diff(a: Ratio<u64>, b: Ratio<u64>) -> Ratio<u64> {
    if a >= b {
        a - b
    } else {
        b - a
    }
}

fn rate(num: u64, den: u64, cell: &str) -> Result<Ratio<u64>> {
    if den == 0 {
        return Err(Error::UndefinedMetric(format!("conditioning cell {cell} is empty")));
    }
    Ok(Ratio::new(num, den))
}

/// Absolute true- and false-positive-rate differences between the groups.
pub fn tprd_fprd(predictions: &[bool], labels: &[bool], groups: &[Attribute]) -> Result<FairnessReport> {
    check_lengths(predictions, labels, Some(groups))?;
    let mut counts = [GroupCounts::default(); 2];
    for ((&p, &y), g) in predictions.iter().zip(labels).zip(groups) {
        let c = &mut counts[g.index()];
        match (y, p) {
            (true, true) => c.true_positives += 1,
            (true, false) => c.false_negatives += 1,
            (false, true) => c.false_positives += 1,
            (false, false) => c.true_negatives += 1,
        }
    }
    let [a, b] = counts;
    let tpr_a = rate(a.true_positives, a.positives(), "y=1, group=a")?;
    let tpr_b = rate(b.true_positives, b.positives(), "y=1, group=b")?;
    let fpr_a = rate(a.false_positives, a.negatives(), "y=0, group=a")?;
    let fpr_b = rate(b.false_positives, b.negatives(), "y=0, group=b")?;
    let tprd = Fraction::from_ratio(abs_diff(tpr_a, tpr_b));
    let fprd = Fraction::from_ratio(abs_diff(fpr_a, fpr_b));
    let (accuracy, f1) = accuracy_f1(predictions, labels)?;
    Ok(FairnessReport {
        tprd: tprd.value(),
        fprd: fprd.value(),
        tprd_exact: tprd,
        fprd_exact: fprd,
        accuracy,
        f1,
        group_a: a,
        group_b: b,
    })
}

/// Accuracy and positive-class F1. F1 is 0 when there is nothing positive to score.
pub fn accuracy_f1(predictions: &[bool], labels: &[bool]) -> Result<(f64, f64)> {
    check_lengths(predictions, labels, None)?;
    if labels.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    let mut correct = 0u64;
    for (&p, &y) in predictions.iter().zip(labels) {
        correct += u64::from(p == y);
        tp += u64::from(p && y);
        fp += u64::from(p && !y);
        fn_ += u64::from(!p && y);
    }
    let accuracy = Ratio::new(correct, labels.len() as u64);
    let f1 = if 2 * tp + fp + fn_ == 0 {
        log::warn!("no positive predictions or labels; F1 reported as 0");
        Ratio::from_integer(0)
    } else {
        Ratio::new(2 * tp, 2 * tp + fp + fn_)
    };
    let to_f64 = |r: Ratio<u64>| *r.numer() as f64 / *r.denom() as f64;
    Ok((to_f64(accuracy), to_f64(f1)))
}

/// One downstream prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub pred: u8,
    pub label: u8,
    pub group: Attribute,
}

pub fn read_predictions(path: &std::path::Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: PredictionRecord = serde_json::from_str(line).map_err(|e| crate::Error::parse(path, i + 1, e.to_string()))?;
        if r.pred > 1 || r.label > 1 {
            return Err(crate::Error::parse(path, i + 1, "pred and label must be 0 or 1"));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn fairness_from_records(records: &[PredictionRecord]) -> Result<FairnessReport> {
    let preds: Vec<bool> = records.iter().map(|r| r.pred == 1).collect();
    let labels: Vec<bool> = records.iter().map(|r| r.label == 1).collect();
    let groups: Vec<Attribute> = records.iter().map(|r| r.group).collect();
    tprd_fprd(&preds, &labels, &groups)
}

/// Target composition of a bias-inducing sample. Group `a` plays the "female" role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSampleSpec {
    pub n: usize,
    pub positive_fraction: f64,
    pub group_a_in_positive_fraction: f64,
    /// Share of group `a` among negatives; defaults to `1 - group_a_in_positive_fraction`.
    pub group_a_in_negative_fraction: Option<f64>,
    pub seed: u64,
}

/// Cell sizes `[(positive, a), (positive, b), (negative, a), (negative, b)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCounts {
    pub positive_a: usize,
    pub positive_b: usize,
    pub negative_a: usize,
    pub negative_b: usize,
}

/// Splits `count` by `fraction`: the minority part is floored and the remainder goes to the majority part.
fn split(count: usize, fraction: f64) -> (usize, usize) {
    let floor = |x: f64| (x + 1e-9).floor() as usize;
    if fraction <= 0.5 {
        let first = floor(count as f64 * fraction).min(count);
        (first, count - first)
    } else {
        let second = floor(count as f64 * (1.0 - fraction)).min(count);
        (count - second, second)
    }
}

impl BiasSampleSpec {
    pub fn validate(&self) -> Result<()> {
        let fractions = [Some(self.positive_fraction), Some(self.group_a_in_positive_fraction), self.group_a_in_negative_fraction];
        if fractions.iter().flatten().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Precondition("bias sample fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn cell_counts(&self) -> CellCounts {
        let (positives, negatives) = split(self.n, self.positive_fraction);
        let (positive_a, positive_b) = split(positives, self.group_a_in_positive_fraction);
        let neg_a = self.group_a_in_negative_fraction.unwrap_or(1.0 - self.group_a_in_positive_fraction);
        let (negative_a, negative_b) = split(negatives, neg_a);
        CellCounts { positive_a, positive_b, negative_a, negative_b }
    }
}

/// Indices (ascending) of a seeded sample with the composition of `spec`.
/// `cells` gives each instance's `(label, group)`.
pub fn induce_bias_sample(cells: &[(bool, Attribute)], spec: &BiasSampleSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let counts = spec.cell_counts();
    let wanted = [
        ((true, Attribute::A), counts.positive_a, "positive/a"),
        ((true, Attribute::B), counts.positive_b, "positive/b"),
        ((false, Attribute::A), counts.negative_a, "negative/a"),
        ((false, Attribute::B), counts.negative_b, "negative/b"),
    ];
    let mut by_cell: BTreeMap<(bool, usize), Vec<usize>> = BTreeMap::new();
    for (i, (label, group)) in cells.iter().enumerate() {
        by_cell.entry((*label, group.index())).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n);
    for ((label, group), needed, name) in wanted {
        let mut members = by_cell.remove(&(label, group.index())).unwrap_or_default();
        if members.len() < needed {
            return Err(Error::InsufficientCell { cell: name.into(), needed, available: members.len() });
        }
        members.shuffle(&mut rng);
        out.extend_from_slice(&members[..needed]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Utility metrics of generated counterfactuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub perplexity: f64,
    pub transfer_accuracy: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<(String, [f64; 2])>);

    impl AttributeClassifier for Fixed {
        fn probabilities(&self, text: &str) -> Result<[f64; 2]> {
            Ok(self.0.iter().find(|(t, _)| t == text).map(|(_, p)| *p).unwrap())
        }
    }

    #[test]
    fn transfer_accuracy_arithmetic() {
        assert!((transfer_accuracy_from_probs(&[0.1, 0.3]).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(transfer_accuracy_from_probs(&[1.0, 1.0]).unwrap(), 0.0);
        let clf = Fixed(vec![
            ("o1".into(), [0.9, 0.1]),
            ("c1".into(), [0.1, 0.9]),
            ("o2".into(), [0.2, 0.8]),
            ("c2".into(), [0.7, 0.3]),
        ]);
        let t = transfer_accuracy(&["o1".into(), "o2".into()], &["c1".into(), "c2".into()], &clf).unwrap();
        assert!((t - (0.9 + 0.7) / 2.0).abs() < 1e-12);
        assert!(transfer_accuracy(&["o1".into()], &[], &clf).is_err());
    }

    #[test]
    fn tprd_definition_example() {
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        let mut groups = Vec::new();
        for (g, hits) in [(Attribute::A, 8), (Attribute::B, 6)] {
            for i in 0..10 {
                preds.push(i < hits);
                labels.push(true);
                groups.push(g);
            }
            preds.push(false);
            labels.push(false);
            groups.push(g);
        }
        let r = tprd_fprd(&preds, &labels, &groups).unwrap();
        assert_eq!(r.tprd_exact, Fraction { numer: 1, denom: 5 });
        assert!((r.tprd - 0.2).abs() < 1e-15);
        assert_eq!(r.fprd, 0.0);
        assert_eq!(r.group_a.total() + r.group_b.total(), 22);
    }

    #[test]
    fn empty_cell_is_named() {
        let err = tprd_fprd(&[true, false], &[true, false], &[Attribute::A, Attribute::A]).unwrap_err();
        assert!(err.to_string().contains("group=b"), "{err}");
    }

    #[test]
    fn accuracy_f1_edges() {
        assert_eq!(accuracy_f1(&[true, false], &[true, false]).unwrap(), (1.0, 1.0));
        assert_eq!(accuracy_f1(&[false, false], &[true, false]).unwrap(), (0.5, 0.0));
        assert_eq!(accuracy_f1(&[false, false], &[false, false]).unwrap(), (1.0, 0.0));
    }

    #[test]
    fn bios_cell_counts() {
        let spec = BiasSampleSpec {
            n: 18_000,
            positive_fraction: 0.5,
            group_a_in_positive_fraction: 0.12,
            group_a_in_negative_fraction: None,
            seed: 0,
        };
        let c = spec.cell_counts();
        assert_eq!((c.positive_a, c.positive_b, c.negative_a, c.negative_b), (1080, 7920, 7920, 1080));
        let balanced = BiasSampleSpec { group_a_in_positive_fraction: 0.5, ..spec };
        let c = balanced.cell_counts();
        assert_eq!((c.positive_a, c.positive_b, c.negative_a, c.negative_b), (4500, 4500, 4500, 4500));
    }

    #[test]
    fn remainder_goes_to_majority() {
        assert_eq!(split(7, 0.5), (3, 4));
        assert_eq!(split(10, 0.75), (8, 2));
        assert_eq!(split(10, 0.26), (2, 8));
    }

    #[test]
    fn insufficient_cell_is_reported() {
        let cells = vec![(true, Attribute::A); 5];
        let spec = BiasSampleSpec { n: 4, positive_fraction: 0.5, group_a_in_positive_fraction: 0.5, group_a_in_negative_fraction: None, seed: 1 };
        match induce_bias_sample(&cells, &spec).unwrap_err() {
            Error::InsufficientCell { cell, needed, available } => {
                assert_eq!((cell.as_str(), needed, available), ("positive/b", 1, 0))
            }
            e => panic!("{e}"),
        }
    }
}
