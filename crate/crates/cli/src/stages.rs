//! The seven pipeline stages and their hashed, resumable execution.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use serde_json::{json, Value};

use fairflow::checkpoint::write_atomic;
use fairflow::corpus::{read_records, Attribute, CorpusFormat, CorpusRecord, TokenizedCorpus, Tokenizer};
use fairflow::dictionary::{assemble, names_from_list, source_counts, NameFrequencyList, WordPairDictionary};
use fairflow::embedding::{read_planted, CachedBackend, EmbeddingBackend, EmbeddingCache, ToyBackend};
use fairflow::eval::{fairness_from_records, perplexity, read_predictions, transfer_accuracy, TextAttributeClassifier};
use fairflow::flow::{
    attribute_training_set, fit_flow, generate_word_pairs, polysemous_candidates, write_pair_report, FlowModel, KChoice,
    VocabularyTable,
};
use fairflow::generator::{train_generator, training_pairs, GeneratorModel};
use fairflow::lm::NgramModel;
use fairflow::rewrite::{
    build_parallel_corpus, read_parallel_jsonl, word_sequence, write_parallel_jsonl, Backends, NgramCorrector,
};
use fairflow::subspace::{collect_prompt_embeddings, discover_attribute_words, train_subspace_classifier, Discovery, PromptPair};

use crate::config::{BackendKind, GeneratorKind, PipelineConfig};
use crate::error::{CliError, Result};
use crate::store::{config_hash, sha256_file, ArtifactStore, Stage, StageRecord};

/// Per-invocation switches that change a stage's output.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageFlags {
    pub no_correction: bool,
    pub manual_dict: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Completed { outputs: usize },
    UpToDate,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub store: ArtifactStore,
    pub force: bool,
}

/// What a stage reads and the hash of the settings it depends on.
struct Plan {
    config: Value,
    inputs: Vec<(String, PathBuf)>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, artifacts: Option<PathBuf>, force: bool) -> Result<Self> {
        cfg.validate()?;
        let root = artifacts.unwrap_or_else(|| cfg.artifacts.clone());
        Ok(Self { cfg, store: ArtifactStore::new(root), force })
    }

    pub fn run(&self, stage: Stage, flags: &StageFlags) -> Result<Outcome> {
        let _lock = self.store.lock()?;
        let plan = self.plan(stage, flags)?;
        let hash = config_hash(&plan.config);
        let mut inputs = BTreeMap::new();
        for (name, path) in &plan.inputs {
            if !path.is_file() {
                return Err(CliError::Precondition(format!("{name} not found: {}", path.display())));
            }
            inputs.insert(name.clone(), sha256_file(path)?);
        }

        if let Some(rec) = self.store.manifest()?.stages.get(stage.name()) {
            if !self.force && rec.config_hash == hash && rec.inputs == inputs && self.store.outputs_intact(rec)? {
                return Ok(Outcome::UpToDate);
            }
            if rec.config_hash != hash && !self.force && self.store.stage_dir(stage).exists() {
                return Err(CliError::Precondition(format!(
                    "{stage} artifacts were built with a different configuration; rerun with --force to overwrite"
                )));
            }
        }

        let dir = self.store.reset_stage(stage)?;
        info!("{stage}: running");
        match stage {
            Stage::Discover => self.discover(&dir)?,
            Stage::TrainFlow => self.train_flow(&dir)?,
            Stage::BuildDict => self.build_dict(&dir, flags)?,
            Stage::BuildParallel => self.build_parallel(&dir, flags)?,
            Stage::TrainGenerator => self.train_generator(&dir)?,
            Stage::Generate => self.generate(&dir)?,
            Stage::Evaluate => self.evaluate(&dir, &hash)?,
        }
        let outputs = self.store.hash_outputs(stage)?;
        let n = outputs.len();
        let mut manifest = self.store.manifest()?;
        manifest.stages.insert(stage.name().to_string(), StageRecord { config_hash: hash, inputs, outputs });
        self.store.write_manifest(&manifest)?;
        Ok(Outcome::Completed { outputs: n })
    }

    fn plan(&self, stage: Stage, flags: &StageFlags) -> Result<Plan> {
        let c = &self.cfg;
        let mut inputs: Vec<(String, PathBuf)> = Vec::new();
        let corpus_inputs = |inputs: &mut Vec<(String, PathBuf)>| {
            inputs.push(("corpus.train".into(), c.corpus.train.clone()));
            if let Some(v) = &c.corpus.wordpiece_vocab {
                inputs.push(("corpus.wordpiece_vocab".into(), v.clone()));
            }
        };
        let backend_inputs = |inputs: &mut Vec<(String, PathBuf)>| match c.backend.kind {
            BackendKind::Toy => {
                if let Some(p) = &c.backend.planted {
                    inputs.push(("backend.planted".into(), p.clone()));
                }
            }
            BackendKind::Cache => inputs.push(("backend.cache".into(), c.backend.cache.clone().expect("validated"))),
        };
        let upstream = |stage: Stage, file: &str, inputs: &mut Vec<(String, PathBuf)>| -> Result<()> {
            let path = self.store.require(stage, file)?;
            inputs.push((format!("{}/{file}", stage.name()), path));
            Ok(())
        };
        let corpus = json!({ "format": c.corpus.format, "wordpiece": c.corpus.wordpiece_vocab.is_some() });
        let config = match stage {
            Stage::Discover => {
                corpus_inputs(&mut inputs);
                backend_inputs(&mut inputs);
                json!({ "stage": stage.name(), "corpus": corpus, "prompt": c.prompt, "backend": backend_settings(c), "discovery": c.discovery })
            }
            Stage::TrainFlow => {
                corpus_inputs(&mut inputs);
                backend_inputs(&mut inputs);
                upstream(Stage::Discover, "attribute_words.json", &mut inputs)?;
                json!({ "stage": stage.name(), "corpus": corpus, "backend": backend_settings(c), "flow": c.flow })
            }
            Stage::BuildDict => {
                if let Some(p) = &flags.manual_dict {
                    inputs.push(("manual_dict".into(), p.clone()));
                } else {
                    corpus_inputs(&mut inputs);
                    backend_inputs(&mut inputs);
                    upstream(Stage::Discover, "attribute_words.json", &mut inputs)?;
                    upstream(Stage::TrainFlow, "flow.bin", &mut inputs)?;
                }
                if let Some(p) = &c.dictionary.names {
                    inputs.push(("dictionary.names".into(), p.clone()));
                }
                json!({
                    "stage": stage.name(),
                    "corpus": corpus,
                    "prompt": c.prompt,
                    "backend": backend_settings(c),
                    "dictionary": { "min_votes": c.dictionary.min_votes, "instance_cap": c.dictionary.instance_cap, "names": c.dictionary.names.is_some() },
                    "manual_dict": flags.manual_dict.is_some(),
                })
            }
            Stage::BuildParallel => {
                corpus_inputs(&mut inputs);
                upstream(Stage::BuildDict, "dictionary.tsv", &mut inputs)?;
                json!({ "stage": stage.name(), "corpus": corpus, "correction": c.correction, "no_correction": flags.no_correction })
            }
            Stage::TrainGenerator => {
                upstream(Stage::BuildParallel, "parallel.jsonl", &mut inputs)?;
                json!({ "stage": stage.name(), "generator": c.generator })
            }
            Stage::Generate => {
                upstream(Stage::TrainGenerator, "generator.bin", &mut inputs)?;
                inputs.push(("corpus.eval".into(), c.eval_corpus().to_path_buf()));
                json!({ "stage": stage.name(), "format": c.corpus.format })
            }
            Stage::Evaluate => {
                corpus_inputs(&mut inputs);
                upstream(Stage::Generate, "generated.jsonl", &mut inputs)?;
                upstream(Stage::BuildParallel, "parallel.jsonl", &mut inputs)?;
                if let Some(p) = self.evaluation_planted() {
                    inputs.push(("evaluation.planted".into(), p.to_path_buf()));
                }
                if let Some(p) = &c.evaluation.predictions {
                    inputs.push(("evaluation.predictions".into(), p.clone()));
                }
                json!({
                    "stage": stage.name(),
                    "corpus": corpus,
                    "backend": backend_settings(c),
                    "evaluation": { "lm_beta": c.evaluation.lm_beta, "classifier": c.evaluation.classifier, "predictions": c.evaluation.predictions.is_some() },
                })
            }
        };
        Ok(Plan { config, inputs })
    }

    fn format(&self) -> CorpusFormat {
        self.cfg.corpus.format.parse().expect("validated")
    }

    fn tokenizer(&self) -> Result<Tokenizer> {
        Ok(match &self.cfg.corpus.wordpiece_vocab {
            Some(p) => Tokenizer::from_vocab_file(p)?,
            None => Tokenizer::whitespace(),
        })
    }

    fn train_corpus(&self) -> Result<TokenizedCorpus> {
        let records = read_records(&self.cfg.corpus.train, self.format())?;
        Ok(TokenizedCorpus::from_records(records, self.tokenizer()?))
    }

    fn backend(&self) -> Result<Box<dyn EmbeddingBackend>> {
        let b = &self.cfg.backend;
        Ok(match b.kind {
            BackendKind::Toy => {
                let planted = match &b.planted {
                    Some(p) => read_planted(p)?,
                    None => Vec::new(),
                };
                Box::new(ToyBackend::new(b.toy.clone(), &planted)?)
            }
            BackendKind::Cache => Box::new(CachedBackend::new(EmbeddingCache::load(b.cache.as_deref().expect("validated"))?)),
        })
    }

    fn prompt(&self) -> Result<PromptPair> {
        Ok(PromptPair::new(&self.cfg.prompt.word_a, &self.cfg.prompt.word_b)?)
    }

    fn read_discovery(&self) -> Result<Discovery> {
        let path = self.store.require(Stage::Discover, "attribute_words.json")?;
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(format!("cannot read {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("corrupt {}: {e}", path.display())))
    }

    fn evaluation_planted(&self) -> Option<&Path> {
        match (&self.cfg.evaluation.planted, self.cfg.backend.kind) {
            (Some(p), _) => Some(p),
            (None, BackendKind::Toy) => self.cfg.backend.planted.as_deref(),
            (None, BackendKind::Cache) => None,
        }
    }

    fn discover(&self, dir: &Path) -> Result<()> {
        let corpus = self.train_corpus()?;
        let backend = self.backend()?;
        let prompt = self.prompt()?;
        let d = &self.cfg.discovery;
        let (a, b) = collect_prompt_embeddings(&corpus, backend.as_ref(), &prompt, d.discovery.min_instance_count)?;
        let clf = train_subspace_classifier(&a, &b, &d.classifier)?;
        let discovery = discover_attribute_words(&corpus, backend.as_ref(), &clf, &prompt, &d.discovery)?;
        info!(
            "discovered {} + {} attribute words (classifier held-out accuracy {:.3})",
            discovery.words_a.len(),
            discovery.words_b.len(),
            clf.meta.held_out_accuracy
        );
        clf.save(&dir.join("classifier.bin"))?;
        write_json(&dir.join("attribute_words.json"), &discovery)?;
        write_atomic(&dir.join("report.tsv"), |w| discovery.write_report(w))?;
        Ok(())
    }

    fn train_flow(&self, dir: &Path) -> Result<()> {
        let discovery = self.read_discovery()?;
        let corpus = self.train_corpus()?;
        let backend = self.backend()?;
        let f = &self.cfg.flow;
        let (vectors, labels) =
            attribute_training_set(&corpus, &discovery.words_a, &discovery.words_b, backend.as_ref(), f.instance_cap)?;
        let choice = match f.k {
            Some(k) => KChoice::Fixed(k),
            None => KChoice::Estimate { min: f.k_min, max: f.k_max },
        };
        let flow = fit_flow(&vectors, &labels, &choice, &f.train)?;
        info!("flow trained with k={} on {} instances", flow.k, vectors.len());
        flow.save(&dir.join("flow.bin"))?;
        let summary = json!({
            "k": flow.k,
            "k_rule": flow.meta.k_rule,
            "dim": flow.dim(),
            "instances": vectors.len(),
            "initial_loss": flow.meta.initial_loss,
            "loss_history": flow.meta.loss_history,
        });
        write_json(&dir.join("summary.json"), &summary)
    }

    fn build_dict(&self, dir: &Path, flags: &StageFlags) -> Result<()> {
        let mut report = serde_json::Map::new();
        let (mut dict, candidates) = if let Some(path) = &flags.manual_dict {
            let dict = WordPairDictionary::load(path)?;
            report.insert("mode".into(), json!("manual"));
            (dict, Vec::new())
        } else {
            let discovery = self.read_discovery()?;
            let flow = FlowModel::load(&self.store.require(Stage::TrainFlow, "flow.bin")?)?;
            let corpus = self.train_corpus()?;
            let backend = self.backend()?;
            let cap = self.cfg.dictionary.instance_cap;
            let table = VocabularyTable::from_corpus(&corpus, backend.as_ref(), cap)?;
            let candidates =
                generate_word_pairs(&corpus, &discovery.words_a, &discovery.words_b, backend.as_ref(), &flow, &table, cap)?;
            let (dict, assembly) = assemble(&self.prompt()?, &candidates, self.cfg.dictionary.min_votes);
            report.insert("mode".into(), json!("discovered"));
            report.insert("below_threshold".into(), json!(assembly.below_threshold.len()));
            report.insert("mirrored".into(), json!(assembly.mirrored));
            report.insert("conflicts".into(), json!(conflict_strings(&assembly.conflicts)));
            report.insert(
                "polysemous".into(),
                json!(polysemous_candidates(&candidates, &discovery.words_a, &discovery.words_b)),
            );
            (dict, candidates)
        };
        if let Some(path) = &self.cfg.dictionary.names {
            let (merged, merge) = dict.merge(&names_from_list(&NameFrequencyList::load(path)?));
            report.insert("names_added".into(), json!(merge.added));
            report.insert("names_conflicts".into(), json!(conflict_strings(&merge.conflicts)));
            dict = merged;
        }
        dict.validate()?;
        report.insert("entries".into(), json!(dict.len()));
        report.insert("sources".into(), json!(source_counts(&dict)));
        info!("dictionary has {} entries", dict.len());
        dict.save(&dir.join("dictionary.tsv"))?;
        write_atomic(&dir.join("pairs.tsv"), |w| write_pair_report(w, &candidates))?;
        write_json(&dir.join("report.json"), &Value::Object(report))
    }

    fn build_parallel(&self, dir: &Path, flags: &StageFlags) -> Result<()> {
        let dict = WordPairDictionary::load(&self.store.require(Stage::BuildDict, "dictionary.tsv")?)?;
        let corpus = self.train_corpus()?;
        let mut cfg = self.cfg.correction.correction.clone();
        if flags.no_correction {
            cfg.enabled = false;
        }
        let corrector = cfg.enabled.then(|| NgramCorrector::from_corpus(&corpus, self.cfg.correction.ngram_beta));
        let backends = corrector.as_ref().map(|c| Backends { discriminator: c, infiller: c });
        let pairs = build_parallel_corpus(&corpus, &dict, backends, &cfg)?;
        let count = |f: fn(&fairflow::rewrite::ParallelPair) -> usize| pairs.iter().map(f).sum::<usize>();
        let summary = json!({
            "pairs": pairs.len(),
            "no_op": pairs.iter().filter(|p| p.no_op).count(),
            "substitutions": count(|p| p.trace.substitutions.len()),
            "masked_spans": count(|p| p.trace.masked_spans.len()),
            "infills": count(|p| p.trace.infills.len()),
            "correction": cfg.enabled,
        });
        info!("{} parallel pairs, correction {}", pairs.len(), if cfg.enabled { "on" } else { "off" });
        write_atomic(&dir.join("parallel.jsonl"), |w| write_parallel_jsonl(w, &pairs))?;
        write_json(&dir.join("summary.json"), &summary)
    }

    fn train_generator(&self, dir: &Path) -> Result<()> {
        let g = &self.cfg.generator;
        if g.kind == GeneratorKind::Pretrained {
            return Err(CliError::Precondition(
                "pretrained generators are not available in this build; set generator.kind = \"toy\"".into(),
            ));
        }
        let parallel = read_parallel_jsonl(&self.store.require(Stage::BuildParallel, "parallel.jsonl")?)?;
        let pairs = training_pairs(&parallel, g.train.include_no_op);
        let model = train_generator(&pairs, &g.train)?;
        let h = &model.meta.loss_history;
        info!("generator trained on {} pairs, {} epochs, final loss {:?}", pairs.len(), h.len(), h.last());
        model.save(&dir.join("generator.bin"))?;
        let summary = json!({
            "pairs": pairs.len(),
            "vocabulary": model.vocab.len(),
            "loss_history": model.meta.loss_history,
            "unknown_tokens": model.meta.unknown_tokens,
            "skipped_pairs": model.meta.skipped_pairs,
        });
        write_json(&dir.join("summary.json"), &summary)
    }

    fn generate(&self, dir: &Path) -> Result<()> {
        let model = GeneratorModel::load(&self.store.require(Stage::TrainGenerator, "generator.bin")?)?;
        let records = read_records(self.cfg.eval_corpus(), self.format())?;
        let texts: Vec<String> = records.iter().map(|r| r.text.clone()).collect();
        let outputs = model.generate_all(&texts);
        write_atomic(&dir.join("generated.jsonl"), |w| {
            for (record, generated) in records.iter().zip(&outputs) {
                serde_json::to_writer(&mut *w, &GeneratedRecord { record, generated })?;
                writeln!(w)?;
            }
            Ok(())
        })?;
        Ok(())
    }

    fn evaluate(&self, dir: &Path, hash: &str) -> Result<()> {
        let c = &self.cfg;
        let train = read_records(&c.corpus.train, self.format())?;
        let generated = read_generated(&self.store.require(Stage::Generate, "generated.jsonl")?)?;
        let parallel = read_parallel_jsonl(&self.store.require(Stage::BuildParallel, "parallel.jsonl")?)?;
        let originals: Vec<String> = generated.iter().map(|(r, _)| r.text.clone()).collect();
        let outputs: Vec<String> = generated.iter().map(|(_, g)| g.clone()).collect();
        let targets: Vec<String> = parallel.iter().filter(|p| !p.no_op).map(|p| p.tgt.clone()).collect();

        let sentences: Vec<Vec<String>> = train.iter().map(|r| word_sequence(&r.text)).collect();
        let lm = NgramModel::train(&sentences, c.evaluation.lm_beta);
        let mut metrics = serde_json::Map::new();
        metrics.insert("perplexity_generated".into(), json!(perplexity(&outputs, &lm)?));
        metrics.insert("perplexity_original".into(), json!(perplexity(&originals, &lm)?));
        if !targets.is_empty() {
            metrics.insert("perplexity_parallel_targets".into(), json!(perplexity(&targets, &lm)?));
        }

        match self.evaluation_planted() {
            Some(planted) => {
                let backend = ToyBackend::new(c.backend.toy.clone(), &read_planted(planted)?)?;
                let labelled: Vec<(String, Attribute)> =
                    train.iter().filter_map(|r| r.group.map(|g| (r.text.clone(), g))).collect();
                let clf = TextAttributeClassifier::train(backend, &labelled, &c.evaluation.classifier)?;
                // texts without a group have no attribute to transfer
                let labelled_idx: Vec<usize> = (0..generated.len()).filter(|&i| generated[i].0.group.is_some()).collect();
                let idx: Vec<usize> = if labelled_idx.is_empty() { (0..generated.len()).collect() } else { labelled_idx };
                let pick = |v: &[String]| -> Vec<String> { idx.iter().map(|&i| v[i].clone()).collect() };
                let ta = transfer_accuracy(&pick(&originals), &pick(&outputs), &clf)?;
                metrics.insert("transfer_accuracy".into(), json!(ta));
                metrics.insert("transfer_accuracy_texts".into(), json!(idx.len()));
                metrics.insert("attribute_classifier_held_out_accuracy".into(), json!(clf.classifier.meta.held_out_accuracy));
            }
            None => {
                log::warn!("no planted list for the evaluation classifier; transfer accuracy skipped");
                metrics.insert("transfer_accuracy".into(), Value::Null);
            }
        }
        if let Some(p) = &c.evaluation.predictions {
            let f = fairness_from_records(&read_predictions(p)?)?;
            metrics.insert("tprd".into(), json!(f.tprd));
            metrics.insert("fprd".into(), json!(f.fprd));
            metrics.insert("accuracy".into(), json!(f.accuracy));
            metrics.insert("f1".into(), json!(f.f1));
        }
        let report = json!({
            "metrics": metrics,
            "counts": { "generated": outputs.len(), "parallel_targets": targets.len(), "lm_training_sentences": sentences.len() },
            "perplexity_pooling": "token",
            "provenance": {
                "embedding_backend": backend_name(c.backend.kind),
                "language_model": format!("toy-trigram(beta={})", c.evaluation.lm_beta),
                "generator": "toy-seq2seq",
                "seed": c.seed,
                "config_hash": hash,
            },
        });
        write_json(&dir.join("report.json"), &report)
    }
}

fn backend_name(kind: BackendKind) -> &'static str {
    match kind {
        BackendKind::Toy => "toy",
        BackendKind::Cache => "cache",
    }
}

/// Backend settings that affect embeddings; file contents are hashed as inputs.
fn backend_settings(c: &PipelineConfig) -> Value {
    json!({ "kind": backend_name(c.backend.kind), "toy": c.backend.toy })
}

fn conflict_strings(conflicts: &[(fairflow::dictionary::Entry, fairflow::dictionary::Entry)]) -> Vec<String> {
    conflicts
        .iter()
        .map(|(kept, dropped)| format!("kept {}-{} over {}-{}", kept.word_a, kept.word_b, dropped.word_a, dropped.word_b))
        .collect()
}

#[derive(Serialize)]
struct GeneratedRecord<'a> {
    #[serde(flatten)]
    record: &'a CorpusRecord,
    generated: &'a str,
}

fn read_generated(path: &Path) -> Result<Vec<(CorpusRecord, String)>> {
    #[derive(serde::Deserialize)]
    struct Row {
        #[serde(flatten)]
        record: CorpusRecord,
        generated: String,
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("cannot read {}", path.display()), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let row: Row = serde_json::from_str(l)
                .map_err(|e| CliError::Runtime(format!("{}:{}: {e}", path.display(), i + 1)))?;
            Ok((row.record, row.generated))
        })
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })?;
    Ok(())
}
