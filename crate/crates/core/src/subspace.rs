//! Attribute classifier over contextual embeddings and attribute-word discovery.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Graph, Matrix, ParamStore};
use crate::checkpoint;
use crate::corpus::{case_fold, is_word_like, Attribute, TokenizedCorpus, DEFAULT_CONTEXT_WINDOW};
use crate::embedding::{embed_all, ContextualEmbedding, EmbeddingBackend};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear};

/// The user's single word-pair prompt describing a demographic axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub word_a: String,
    pub word_b: String,
}

impl PromptPair {
    pub fn new(word_a: &str, word_b: &str) -> Result<Self> {
        let (a, b) = (case_fold(word_a.trim()), case_fold(word_b.trim()));
        if a.is_empty() || b.is_empty() {
            return Err(Error::InvalidPrompt("prompt words must be non-empty".into()));
        }
        if a == b {
            return Err(Error::InvalidPrompt(format!("prompt words must differ, got {a:?} twice")));
        }
        Ok(Self { word_a: a, word_b: b })
    }

    pub fn word(&self, side: Attribute) -> &str {
        match side {
            Attribute::A => &self.word_a,
            Attribute::B => &self.word_b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddingSet {
    pub label: Attribute,
    pub embeddings: Vec<ContextualEmbedding>,
}

impl LabeledEmbeddingSet {
    pub fn dim(&self) -> Option<usize> {
        self.embeddings.first().map(|e| e.vector.len())
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn vectors(&self) -> Vec<Vec<f64>> {
        self.embeddings.iter().map(|e| e.vector.clone()).collect()
    }
}

/// Embeds every instance of both prompt words.
pub fn collect_prompt_embeddings(
    corpus: &TokenizedCorpus,
    backend: &dyn EmbeddingBackend,
    prompt: &PromptPair,
    min_instance_count: usize,
) -> Result<(LabeledEmbeddingSet, LabeledEmbeddingSet)> {
    let mut sets = Vec::with_capacity(2);
    for side in [Attribute::A, Attribute::B] {
        let word = prompt.word(side);
        let occurrences = corpus.find_occurrences(word, DEFAULT_CONTEXT_WINDOW);
        if occurrences.len() < min_instance_count.max(1) {
            return Err(Error::InsufficientOccurrences {
                word: word.to_string(),
                count: occurrences.len(),
                required: min_instance_count.max(1),
            });
        }
        sets.push(LabeledEmbeddingSet { label: side, embeddings: embed_all(backend, &occurrences)? });
    }
    let b = sets.pop().unwrap();
    let a = sets.pop().unwrap();
    Ok((a, b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    /// Defaults to `max(64, d / 4)`.
    pub hidden: Option<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: None,
            epochs: 100,
            learning_rate: 5e-3,
            batch_size: 32,
            validation_fraction: 0.2,
            patience: 10,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub held_out_accuracy: f64,
    pub train_size: usize,
    pub validation_size: usize,
}

/// One-hidden-layer GELU network with a two-way softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceClassifier {
    params: ParamStore,
    hidden_layer: Linear,
    output_layer: Linear,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub meta: TrainingMeta,
}

fn to_matrix(rows: &[&[f64]], dim: usize) -> Matrix {
    let mut m = Matrix::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).iter_mut().zip(r.iter()).for_each(|(a, &b)| *a = b);
    }
    m
}

impl SubspaceClassifier {
    fn init(input_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let hidden_layer = Linear::new(&mut params, "hidden", input_dim, hidden_dim, Init::Xavier, &mut rng);
        let output_layer = Linear::new(&mut params, "output", hidden_dim, 2, Init::Xavier, &mut rng);
        Self {
            params,
            hidden_layer,
            output_layer,
            input_dim,
            hidden_dim,
            meta: TrainingMeta { seed, epochs: 0, held_out_accuracy: 0.0, train_size: 0, validation_size: 0 },
        }
    }

    fn logits<'a>(&'a self, g: &mut Graph<'a>, x: Matrix) -> crate::autodiff::Var {
        let x = g.input(x);
        let h = self.hidden_layer.forward(g, x);
        let h = g.gelu(h);
        self.output_layer.forward(g, h)
    }

    /// Row-wise `[P(a), P(b)]`.
    pub fn probabilities_batch(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch { expected: self.input_dim, got: x.ncols() });
        }
        let mut g = Graph::new(&self.params);
        let logits = self.logits(&mut g, x.clone());
        Ok(crate::autodiff::softmax_rows(g.value(logits)))
    }

    pub fn probabilities(&self, z: &[f64]) -> Result<[f64; 2]> {
        let p = self.probabilities_batch(&to_matrix(&[z], z.len()))?;
        Ok([p[[0, 0]], p[[0, 1]]])
    }

    pub fn classify(&self, z: &ContextualEmbedding) -> Result<[f64; 2]> {
        self.probabilities(&z.vector)
    }

    pub fn predict(&self, z: &[f64]) -> Result<Attribute> {
        let [pa, _] = self.probabilities(z)?;
        Ok(if pa >= 0.5 { Attribute::A } else { Attribute::B })
    }

    fn loss_and_accuracy(&self, x: &Matrix, y: &[usize]) -> (f64, f64) {
        let mut g = Graph::new(&self.params);
        let logits = self.logits(&mut g, x.clone());
        let loss = g.cross_entropy(logits, y);
        let correct = g
            .value(logits)
            .rows()
            .into_iter()
            .zip(y)
            .filter(|(r, &t)| usize::from(r[1] > r[0]) == t)
            .count();
        (g.scalar(loss) / y.len() as f64, correct as f64 / y.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_atomic(path, |w| self.write_to(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut checkpoint::open(path)?)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        checkpoint::write_header(w, CLASSIFIER_MAGIC, CLASSIFIER_VERSION)?;
        w.write_u32::<LittleEndian>(self.input_dim as u32)?;
        w.write_u32::<LittleEndian>(self.hidden_dim as u32)?;
        w.write_u64::<LittleEndian>(self.meta.seed)?;
        w.write_u32::<LittleEndian>(self.meta.epochs as u32)?;
        w.write_f64::<LittleEndian>(self.meta.held_out_accuracy)?;
        w.write_u32::<LittleEndian>(self.meta.train_size as u32)?;
        w.write_u32::<LittleEndian>(self.meta.validation_size as u32)?;
        checkpoint::write_params(w, &self.params)
    }

    pub fn read_from(r: &mut impl std::io::Read) -> Result<Self> {
        checkpoint::read_header(r, CLASSIFIER_MAGIC, CLASSIFIER_VERSION)?;
        let input_dim = r.read_u32::<LittleEndian>()? as usize;
        let hidden_dim = r.read_u32::<LittleEndian>()? as usize;
        let seed = r.read_u64::<LittleEndian>()?;
        let epochs = r.read_u32::<LittleEndian>()? as usize;
        let held_out_accuracy = r.read_f64::<LittleEndian>()?;
        let train_size = r.read_u32::<LittleEndian>()? as usize;
        let validation_size = r.read_u32::<LittleEndian>()? as usize;
        let params = checkpoint::read_params(r)?;
        let mut model = Self::init(input_dim, hidden_dim, seed);
        if params.len() != model.params.len()
            || params.ids().any(|id| params.get(id).raw_dim() != model.params.get(id).raw_dim())
        {
            return Err(Error::Checkpoint("classifier parameter shapes do not match header".into()));
        }
        model.params = params;
        model.meta = TrainingMeta { seed, epochs, held_out_accuracy, train_size, validation_size };
        Ok(model)
    }
}

const CLASSIFIER_MAGIC: &[u8; 8] = b"FFCLASS\0";
const CLASSIFIER_VERSION: u32 = 1;

/// Trains the two-way classifier on labelled vectors.
///
/// The larger class is downsampled to the size of the smaller one, a seeded
/// split holds out `validation_fraction` of the data, and the parameters with
/// the best validation loss are kept.
pub fn train_classifier(
    vectors_a: &[Vec<f64>],
    vectors_b: &[Vec<f64>],
    config: &ClassifierConfig,
) -> Result<SubspaceClassifier> {
    if vectors_a.is_empty() || vectors_b.is_empty() {
        return Err(Error::Precondition("both classes need at least one embedding".into()));
    }
    let dim = vectors_a[0].len();
    if let Some(v) = vectors_a.iter().chain(vectors_b).find(|v| v.len() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, got: v.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = vectors_a.len().min(vectors_b.len());
    let mut idx_a: Vec<usize> = (0..vectors_a.len()).collect();
    let mut idx_b: Vec<usize> = (0..vectors_b.len()).collect();
    idx_a.shuffle(&mut rng);
    idx_b.shuffle(&mut rng);
    let mut samples: Vec<(&[f64], usize)> = idx_a[..n]
        .iter()
        .map(|&i| (vectors_a[i].as_slice(), 0))
        .chain(idx_b[..n].iter().map(|&i| (vectors_b[i].as_slice(), 1)))
        .collect();
    samples.shuffle(&mut rng);

    let n_val = ((samples.len() as f64) * config.validation_fraction).round() as usize;
    let n_val = n_val.min(samples.len().saturating_sub(2));
    let (val, train) = samples.split_at(n_val);
    // tiny inputs leave no held-out data; fall back to the training set
    let val = if val.is_empty() { train } else { val };
    let val_x = to_matrix(&val.iter().map(|s| s.0).collect::<Vec<_>>(), dim);
    let val_y: Vec<usize> = val.iter().map(|s| s.1).collect();

    let hidden = config.hidden.unwrap_or_else(|| 64.max(dim / 4));
    let mut model = SubspaceClassifier::init(dim, hidden, config.seed);
    let mut opt = Adam::new(&model.params, config.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let (mut best_loss, _) = model.loss_and_accuracy(&val_x, &val_y);
    let mut best_params = model.params.clone();
    let mut best_epoch = 0;
    let mut epochs_run = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size.max(1)) {
            let x = to_matrix(&batch.iter().map(|&i| train[i].0).collect::<Vec<_>>(), dim);
            let y: Vec<usize> = batch.iter().map(|&i| train[i].1).collect();
            let grads = {
                let mut g = Graph::new(&model.params);
                let logits = model.logits(&mut g, x);
                let loss = g.cross_entropy(logits, &y);
                let loss = g.scale(loss, 1.0 / y.len() as f64);
                if !g.scalar(loss).is_finite() {
                    return Err(Error::TrainingDiverged { epoch });
                }
                g.backward(loss)
            };
            opt.step(&mut model.params, &grads);
        }
        epochs_run = epoch;
        let (val_loss, _) = model.loss_and_accuracy(&val_x, &val_y);
        if !val_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        if val_loss < best_loss - 1e-9 {
            best_loss = val_loss;
            best_params = model.params.clone();
            best_epoch = epoch;
        } else if epoch - best_epoch >= config.patience {
            break;
        }
    }
    model.params = best_params;
    let (_, accuracy) = model.loss_and_accuracy(&val_x, &val_y);
    model.meta = TrainingMeta {
        seed: config.seed,
        epochs: epochs_run,
        held_out_accuracy: accuracy,
        train_size: train.len(),
        validation_size: val.len(),
    };
    log::info!(
        "classifier trained: {} epochs (best {}), held-out accuracy {:.4}",
        epochs_run,
        best_epoch,
        accuracy
    );
    Ok(model)
}

pub fn train_subspace_classifier(
    set_a: &LabeledEmbeddingSet,
    set_b: &LabeledEmbeddingSet,
    config: &ClassifierConfig,
) -> Result<SubspaceClassifier> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::Precondition("both embedding sets must be non-empty".into()));
    }
    if set_a.dim() != set_b.dim() {
        return Err(Error::DimensionMismatch {
            expected: set_a.dim().unwrap_or(0),
            got: set_b.dim().unwrap_or(0),
        });
    }
    train_classifier(&set_a.vectors(), &set_b.vectors(), config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoveryConfig {
    /// A word is selected when one of its instances has `P(side | z) > threshold_phi`.
    pub threshold_phi: f64,
    pub min_instance_count: usize,
    /// Instances scored per word.
    pub instance_cap: usize,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self { threshold_phi: 0.95, min_instance_count: 1, instance_cap: 256 }
    }
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_phi > 0.0 && self.threshold_phi <= 1.0) {
            return Err(Error::Precondition(format!("phi must lie in (0, 1], got {}", self.threshold_phi)));
        }
        if self.min_instance_count == 0 {
            return Err(Error::Precondition("min_instance_count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-word classifier scores over the scored instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordScore {
    pub word: String,
    pub max_prob_a: f64,
    pub max_prob_b: f64,
    pub instance_count: usize,
}

impl WordScore {
    pub fn max_prob(&self, side: Attribute) -> f64 {
        match side {
            Attribute::A => self.max_prob_a,
            Attribute::B => self.max_prob_b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discovery {
    pub words_a: BTreeSet<String>,
    pub words_b: BTreeSet<String>,
    pub scores: Vec<WordScore>,
}

impl Discovery {
    pub fn words(&self, side: Attribute) -> &BTreeSet<String> {
        match side {
            Attribute::A => &self.words_a,
            Attribute::B => &self.words_b,
        }
    }

    /// Words selected on both sides.
    pub fn ambiguous(&self) -> BTreeSet<String> {
        self.words_a.intersection(&self.words_b).cloned().collect()
    }

    /// TSV rows `word, side, max_probability, instance_count`, one per selected side.
    pub fn write_report(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "word\tside\tmax_probability\tinstance_count")?;
        for s in &self.scores {
            for side in [Attribute::A, Attribute::B] {
                if self.words(side).contains(&s.word) {
                    writeln!(w, "{}\t{}\t{}\t{}", s.word, side, s.max_prob(side), s.instance_count)?;
                }
            }
        }
        Ok(())
    }
}

/// Scores every single-subtoken word of the corpus that contains a letter; output is ordered by word.
pub fn score_vocabulary(
    corpus: &TokenizedCorpus,
    backend: &dyn EmbeddingBackend,
    classifier: &SubspaceClassifier,
    instance_cap: usize,
) -> Result<Vec<WordScore>> {
    let index = corpus.index_single_subtoken_words(DEFAULT_CONTEXT_WINDOW, instance_cap.max(1));
    let entries: Vec<_> = index.into_iter().filter(|(w, _)| is_word_like(w)).collect();
    entries
        .par_iter()
        .map(|(word, occurrences)| {
            let embeddings = embed_all(backend, occurrences)?;
            let rows: Vec<&[f64]> = embeddings.iter().map(|e| e.vector.as_slice()).collect();
            let probs = classifier.probabilities_batch(&to_matrix(&rows, classifier.input_dim))?;
            let max_a = probs.column(0).fold(0.0f64, |a, &b| a.max(b));
            let max_b = probs.column(1).fold(0.0f64, |a, &b| a.max(b));
            Ok(WordScore { word: word.clone(), max_prob_a: max_a, max_prob_b: max_b, instance_count: occurrences.len() })
        })
        .collect()
}

/// Applies the threshold to precomputed scores.
pub fn select_attribute_words(
    scores: Vec<WordScore>,
    classifier: &SubspaceClassifier,
    prompt: &PromptPair,
    config: &DiscoveryConfig,
) -> Discovery {
    let phi = config.threshold_phi;
    let pick = |side: Attribute| -> BTreeSet<String> {
        scores
            .iter()
            .filter(|s| s.instance_count >= config.min_instance_count && s.max_prob(side) > phi)
            .map(|s| s.word.clone())
            .collect()
    };
    let mut words_a = pick(Attribute::A);
    let mut words_b = pick(Attribute::B);
    if classifier.meta.held_out_accuracy > phi {
        words_a.insert(prompt.word_a.clone());
        words_b.insert(prompt.word_b.clone());
    }
    Discovery { words_a, words_b, scores }
}

pub fn discover_attribute_words(
    corpus: &TokenizedCorpus,
    backend: &dyn EmbeddingBackend,
    classifier: &SubspaceClassifier,
    prompt: &PromptPair,
    config: &DiscoveryConfig,
) -> Result<Discovery> {
    config.validate()?;
    let scores = score_vocabulary(corpus, backend, classifier, config.instance_cap)?;
    Ok(select_attribute_words(scores, classifier, prompt, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CorpusRecord, Tokenizer};
    use crate::embedding::{PlantedWord, ToyBackend, ToyBackendConfig};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian_clouds(seed: u64, dim: usize, n: usize, offset: f64, std: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, std).unwrap();
        let mut cloud = |sign: f64| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    (0..dim)
                        .map(|j| noise.sample(&mut rng) + if j == 0 { sign * offset } else { 0.0 })
                        .collect()
                })
                .collect()
        };
        let a = cloud(1.0);
        let b = cloud(-1.0);
        (a, b)
    }

    #[test]
    fn prompt_pair_validation() {
        assert!(PromptPair::new("she", "she").is_err());
        assert!(PromptPair::new("She", "she").is_err());
        assert!(PromptPair::new("", "he").is_err());
        assert_eq!(PromptPair::new("She", "he").unwrap().word_a, "she");
    }

    #[test]
    fn separable_clouds_are_learned() {
        let (a, b) = gaussian_clouds(1, 8, 200, 3.0, 0.1);
        let clf = train_classifier(&a, &b, &ClassifierConfig::default()).unwrap();
        assert!(clf.meta.held_out_accuracy >= 0.99, "{}", clf.meta.held_out_accuracy);
        let centroid: Vec<f64> = (0..8).map(|j| a.iter().map(|v| v[j]).sum::<f64>() / a.len() as f64).collect();
        assert!(clf.probabilities(&centroid).unwrap()[0] > 0.9);
        // symmetric fixture: the origin sits on the decision boundary
        let p0 = clf.probabilities(&[0.0; 8]).unwrap()[0];
        assert!((0.3..=0.7).contains(&p0), "P(a | 0) = {p0}");
    }

    #[test]
    fn identical_sets_are_indistinguishable() {
        let (a, _) = gaussian_clouds(2, 8, 200, 0.0, 1.0);
        let clf = train_classifier(&a, &a, &ClassifierConfig::default()).unwrap();
        assert!((clf.meta.held_out_accuracy - 0.5).abs() <= 0.1, "{}", clf.meta.held_out_accuracy);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let (a, b) = gaussian_clouds(3, 4, 50, 1.0, 1.0);
        let cfg = ClassifierConfig { epochs: 5, ..Default::default() };
        let one = train_classifier(&a, &b, &cfg).unwrap();
        let two = train_classifier(&a, &b, &cfg).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn probabilities_normalise_and_check_dimension() {
        let (a, b) = gaussian_clouds(4, 4, 30, 1.0, 1.0);
        let clf = train_classifier(&a, &b, &ClassifierConfig { epochs: 3, ..Default::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let z: Vec<f64> = (0..4).map(|_| rng.random_range(-50.0..50.0)).collect();
            let [pa, pb] = clf.probabilities(&z).unwrap();
            assert!((0.0..=1.0).contains(&pa) && (pa + pb - 1.0).abs() < 1e-6);
        }
        assert!(matches!(clf.probabilities(&[0.0; 5]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (a, b) = gaussian_clouds(5, 4, 30, 1.0, 1.0);
        let clf = train_classifier(&a, &b, &ClassifierConfig { epochs: 3, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        clf.write_to(&mut buf).unwrap();
        assert_eq!(SubspaceClassifier::read_from(&mut buf.as_slice()).unwrap(), clf);
    }

    fn planted_corpus() -> (TokenizedCorpus, ToyBackend) {
        let planted = [
            PlantedWord { word: "she".into(), concept: "pron".into(), group: Attribute::A },
            PlantedWord { word: "he".into(), concept: "pron".into(), group: Attribute::B },
        ];
        let mut records = Vec::new();
        for i in 0..10 {
            records.push(CorpusRecord::new(format!("she walked to market {i}")));
            records.push(CorpusRecord::new(format!("he walked to river {i}")));
        }
        let corpus = TokenizedCorpus::from_records(records, Tokenizer::whitespace());
        (corpus, ToyBackend::new(ToyBackendConfig::default(), &planted).unwrap())
    }

    #[test]
    fn prompt_embeddings_match_occurrence_counts() {
        let (corpus, backend) = planted_corpus();
        let prompt = PromptPair::new("she", "he").unwrap();
        let (a, b) = collect_prompt_embeddings(&corpus, &backend, &prompt, 1).unwrap();
        assert_eq!(a.len(), corpus.find_occurrences("she", 64).len());
        assert_eq!((a.len(), b.len()), (10, 10));
        assert_eq!((a.label, b.label), (Attribute::A, Attribute::B));
    }

    #[test]
    fn missing_prompt_word_reports_count() {
        let (corpus, backend) = planted_corpus();
        let prompt = PromptPair::new("she", "they").unwrap();
        match collect_prompt_embeddings(&corpus, &backend, &prompt, 1) {
            Err(Error::InsufficientOccurrences { word, count, .. }) => assert_eq!((word.as_str(), count), ("they", 0)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn phi_of_one_selects_nothing() {
        let (corpus, backend) = planted_corpus();
        let prompt = PromptPair::new("she", "he").unwrap();
        let (a, b) = collect_prompt_embeddings(&corpus, &backend, &prompt, 1).unwrap();
        let clf = train_subspace_classifier(&a, &b, &ClassifierConfig::default()).unwrap();
        let cfg = DiscoveryConfig { threshold_phi: 1.0, ..Default::default() };
        let d = discover_attribute_words(&corpus, &backend, &clf, &prompt, &cfg).unwrap();
        assert!(d.words_a.is_empty() && d.words_b.is_empty());
    }
}
