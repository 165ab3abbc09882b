//! Pipeline configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fairflow::embedding::ToyBackendConfig;
use fairflow::flow::FlowTrainConfig;
use fairflow::generator::GeneratorTrainConfig;
use fairflow::rewrite::{CorrectionConfig, DEFAULT_NGRAM_BETA};
use fairflow::subspace::{ClassifierConfig, DiscoveryConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Overrides every section seed when set.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_artifacts")]
    pub artifacts: PathBuf,
    pub corpus: CorpusSection,
    pub prompt: PromptSection,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub discovery: DiscoverySection,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub dictionary: DictionarySection,
    #[serde(default)]
    pub correction: CorrectionSection,
    #[serde(default)]
    pub generator: GeneratorSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

fn default_artifacts() -> PathBuf {
    PathBuf::from("artifacts")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSection {
    pub train: PathBuf,
    /// Texts to rewrite and score; defaults to the training corpus.
    #[serde(default)]
    pub eval: Option<PathBuf>,
    #[serde(default = "default_format")]
    pub format: String,
    /// Wordpiece vocabulary; whitespace tokenization when absent.
    #[serde(default)]
    pub wordpiece_vocab: Option<PathBuf>,
}

fn default_format() -> String {
    "jsonl".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSection {
    pub word_a: String,
    pub word_b: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Toy,
    /// Precomputed vectors from an external encoder.
    Cache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct BackendSection {
    pub kind: BackendKind,
    /// `word<TAB>concept<TAB>group` list for the toy backend.
    pub planted: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub toy: ToyBackendConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DiscoverySection {
    #[serde(flatten)]
    pub discovery: DiscoveryConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSection {
    #[serde(flatten)]
    pub train: FlowTrainConfig,
    /// Fixed attribute-block size; estimated from the data when absent.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "default_k_min")]
    pub k_min: usize,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_instance_cap")]
    pub instance_cap: usize,
}

fn default_k_min() -> usize {
    1
}

fn default_k_max() -> usize {
    16
}

fn default_instance_cap() -> usize {
    256
}

impl Default for FlowSection {
    fn default() -> Self {
        Self {
            train: FlowTrainConfig::default(),
            k: None,
            k_min: default_k_min(),
            k_max: default_k_max(),
            instance_cap: default_instance_cap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DictionarySection {
    pub min_votes: f64,
    /// `name<TAB>frequency<TAB>group` list for the names intervention.
    pub names: Option<PathBuf>,
    pub instance_cap: usize,
}

impl Default for DictionarySection {
    fn default() -> Self {
        Self { min_votes: fairflow::dictionary::DEFAULT_MIN_VOTES, names: None, instance_cap: default_instance_cap() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionSection {
    #[serde(flatten)]
    pub correction: CorrectionConfig,
    #[serde(default = "default_beta")]
    pub ngram_beta: f64,
}

fn default_beta() -> f64 {
    DEFAULT_NGRAM_BETA
}

impl Default for CorrectionSection {
    fn default() -> Self {
        Self { correction: CorrectionConfig::default(), ngram_beta: DEFAULT_NGRAM_BETA }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    #[default]
    Toy,
    Pretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GeneratorSection {
    #[serde(default)]
    pub kind: GeneratorKind,
    #[serde(flatten)]
    pub train: GeneratorTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationSection {
    pub lm_beta: f64,
    /// Planted list for the attribute classifier's toy backend; falls back to `backend.planted`.
    pub planted: Option<PathBuf>,
    /// Downstream predictions as JSONL `{"pred", "label", "group"}`.
    pub predictions: Option<PathBuf>,
    pub classifier: ClassifierConfig,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self { lm_beta: DEFAULT_NGRAM_BETA, planted: None, predictions: None, classifier: ClassifierConfig::default() }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Precondition(format!("invalid config: {e}")))
    }

    /// Reads the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Precondition(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.artifacts);
        fix(&mut self.corpus.train);
        for p in [
            &mut self.corpus.eval,
            &mut self.corpus.wordpiece_vocab,
            &mut self.backend.planted,
            &mut self.backend.cache,
            &mut self.dictionary.names,
            &mut self.evaluation.planted,
            &mut self.evaluation.predictions,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Pushes the global seed into every seeded section.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.discovery.classifier.seed = seed;
        self.flow.train.seed = seed;
        self.generator.train.seed = seed;
        self.evaluation.classifier.seed = seed;
    }

    pub fn eval_corpus(&self) -> &Path {
        self.corpus.eval.as_deref().unwrap_or(&self.corpus.train)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let pre = |m: String| Err(CliError::Precondition(m));
        if !["jsonl", "plain", "txt"].contains(&self.corpus.format.as_str()) {
            return pre(format!("unknown corpus format {:?}", self.corpus.format));
        }
        if self.backend.kind == BackendKind::Cache && self.backend.cache.is_none() {
            return pre("backend.kind = \"cache\" needs backend.cache".into());
        }
        if self.flow.k_min == 0 || self.flow.k_min > self.flow.k_max {
            return pre(format!("invalid k range {}..={}", self.flow.k_min, self.flow.k_max));
        }
        if !(0.0..=1.0).contains(&self.dictionary.min_votes) {
            return pre(format!("min_votes must lie in [0, 1], got {}", self.dictionary.min_votes));
        }
        self.discovery.discovery.validate()?;
        self.flow.train.validate()?;
        self.correction.correction.validate()?;
        self.generator.train.arch.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = PipelineConfig::from_toml(
            "[corpus]\ntrain = \"c.jsonl\"\n[prompt]\nword_a = \"she\"\nword_b = \"he\"\n",
        )
        .unwrap();
        assert_eq!(cfg.flow.k_max, 16);
        assert_eq!(cfg.discovery.discovery.threshold_phi, 0.95);
        assert_eq!(cfg.generator.train.arch.d_model, 128);
        assert_eq!(cfg.correction.correction.threshold_theta, 0.1);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn nested_sections_parse() {
        let cfg = PipelineConfig::from_toml(
            r#"
seed = 5
[corpus]
train = "c.jsonl"
[prompt]
word_a = "she"
word_b = "he"
[discovery]
threshold_phi = 0.9
[discovery.classifier]
epochs = 3
[flow]
input_noise = 0.1
k = 2
[generator]
epochs = 4
[generator.arch]
d_model = 32
heads = 2
ffn = 64
encoder_layers = 1
decoder_layers = 1
max_len = 64
"#,
        )
        .unwrap();
        assert_eq!(cfg.discovery.discovery.threshold_phi, 0.9);
        assert_eq!(cfg.discovery.classifier.epochs, 3);
        assert_eq!((cfg.flow.k, cfg.flow.train.input_noise), (Some(2), 0.1));
        assert_eq!((cfg.generator.train.epochs, cfg.generator.train.arch.d_model), (4, 32));
        assert_eq!(cfg.seed, Some(5));
    }

    #[test]
    fn global_seed_reaches_every_section() {
        let mut cfg = PipelineConfig::from_toml(
            "[corpus]\ntrain = \"c\"\n[prompt]\nword_a = \"a\"\nword_b = \"b\"\n[generator.arch]\nd_model = 64\n",
        )
        .unwrap();
        assert_eq!(cfg.generator.train.arch.heads, 4);
        cfg.apply_seed(11);
        let seeds = [cfg.discovery.classifier.seed, cfg.flow.train.seed, cfg.generator.train.seed, cfg.evaluation.classifier.seed];
        assert_eq!(seeds, [11; 4]);
    }

    #[test]
    fn bad_values_are_preconditions() {
        let mut cfg = PipelineConfig::from_toml(
            "[corpus]\ntrain = \"c\"\nformat = \"xml\"\n[prompt]\nword_a = \"a\"\nword_b = \"b\"\n",
        )
        .unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Precondition(_))));
        cfg.corpus.format = "jsonl".into();
        cfg.flow.train.sigma = 1.0;
        assert_eq!(cfg.validate().unwrap_err().status(), 2);
    }
}
