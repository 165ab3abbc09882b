//! Word-level language models used for fluency scoring and the toy
//! correction backends.

use std::collections::HashMap;

use crate::corpus::case_fold;
use crate::error::{Error, Result};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

/// Anything that assigns per-token probabilities to a word sequence.
pub trait LanguageModel: Send + Sync {
    fn name(&self) -> &str;
    /// Natural-log probability of each word followed by the end-of-sequence event.
    fn token_log_probs(&self, words: &[String]) -> Result<Vec<f64>>;
}

/// Assigns `1 / V` to every event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformLm {
    pub vocab_size: usize,
}

impl LanguageModel for UniformLm {
    fn name(&self) -> &str {
        "uniform"
    }

    fn token_log_probs(&self, words: &[String]) -> Result<Vec<f64>> {
        if self.vocab_size == 0 {
            return Err(Error::Precondition("uniform LM needs a positive vocabulary size".into()));
        }
        Ok(vec![-(self.vocab_size as f64).ln(); words.len() + 1])
    }
}

/// Hierarchically smoothed trigram model:
/// `P(w | u v) = (c(u v w) + β P(w | v)) / (c(u v) + β)`, bottoming out in an add-one unigram.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    pub beta: f64,
    vocab: Vec<String>,
    ids: HashMap<String, u32>,
    unigram: Vec<u64>,
    total: u64,
    bigram: HashMap<u32, HashMap<u32, u64>>,
    trigram: HashMap<(u32, u32), HashMap<u32, u64>>,
}

const BOS_ID: u32 = 0;
const EOS_ID: u32 = 1;
const UNK_ID: u32 = 2;

impl NgramModel {
    /// Trains on sentences given as word lists; words are case-folded.
    pub fn train<S: AsRef<str>>(sentences: &[Vec<S>], beta: f64) -> Self {
        let mut model = Self {
            beta,
            vocab: vec![BOS.into(), EOS.into(), UNK.into()],
            ids: HashMap::new(),
            unigram: vec![0; 3],
            total: 0,
            bigram: HashMap::new(),
            trigram: HashMap::new(),
        };
        model.rebuild_ids();
        for s in sentences {
            let mut seq = vec![BOS_ID, BOS_ID];
            for w in s {
                let key = case_fold(w.as_ref());
                let id = match model.ids.get(&key) {
                    Some(&id) => id,
                    None => {
                        let id = model.vocab.len() as u32;
                        model.vocab.push(key.clone());
                        model.ids.insert(key, id);
                        model.unigram.push(0);
                        id
                    }
                };
                seq.push(id);
            }
            seq.push(EOS_ID);
            for i in 2..seq.len() {
                let (u, v, w) = (seq[i - 2], seq[i - 1], seq[i]);
                model.unigram[w as usize] += 1;
                model.total += 1;
                *model.bigram.entry(v).or_default().entry(w).or_default() += 1;
                *model.trigram.entry((u, v)).or_default().entry(w).or_default() += 1;
            }
        }
        model
    }

    /// Same model trained on reversed sentences.
    pub fn train_reversed<S: AsRef<str>>(sentences: &[Vec<S>], beta: f64) -> Self {
        let reversed: Vec<Vec<&str>> = sentences.iter().map(|s| s.iter().rev().map(AsRef::as_ref).collect()).collect();
        Self::train(&reversed, beta)
    }

    fn rebuild_ids(&mut self) {
        self.ids = self.vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
    }

    /// Number of word types, excluding the boundary and unknown markers.
    pub fn vocab_size(&self) -> usize {
        self.vocab.len() - 3
    }

    /// Word types seen in training, in first-seen order.
    pub fn words(&self) -> &[String] {
        &self.vocab[3..]
    }

    pub fn id(&self, word: &str) -> u32 {
        self.ids.get(&case_fold(word)).copied().unwrap_or(UNK_ID)
    }

    fn unigram_prob(&self, w: u32) -> f64 {
        // add-one over every type plus the unknown event
        (self.unigram[w as usize] as f64 + 1.0) / (self.total as f64 + (self.vocab.len() - 1) as f64)
    }

    fn smoothed(&self, counts: Option<&HashMap<u32, u64>>, w: u32, lower: f64) -> f64 {
        let Some(counts) = counts else { return lower };
        let c = counts.get(&w).copied().unwrap_or(0) as f64;
        let n: u64 = counts.values().sum();
        (c + self.beta * lower) / (n as f64 + self.beta)
    }

    /// `P(w | context)`; `None` entries in the two-word context act as unknown history and back off.
    pub fn prob_id(&self, w: u32, u: Option<u32>, v: Option<u32>) -> f64 {
        let p1 = self.unigram_prob(w);
        let Some(v) = v else { return p1 };
        let p2 = self.smoothed(self.bigram.get(&v), w, p1);
        let Some(u) = u else { return p2 };
        self.smoothed(self.trigram.get(&(u, v)), w, p2)
    }

    /// Candidate ids for the argmax in [`Self::relative_prob`] and infilling: every real word.
    pub fn candidate_ids(&self) -> impl Iterator<Item = u32> {
        3..self.vocab.len() as u32
    }

    pub fn word(&self, id: u32) -> &str {
        &self.vocab[id as usize]
    }

    /// `P(w | ctx) / max_x P(x | ctx)` over real words, in `[0, 1]`.
    pub fn relative_prob(&self, w: u32, u: Option<u32>, v: Option<u32>) -> f64 {
        let p = self.prob_id(w, u, v);
        let best = self.candidate_ids().map(|x| self.prob_id(x, u, v)).fold(p, f64::max);
        if best > 0.0 {
            (p / best).min(1.0)
        } else {
            0.0
        }
    }
}

impl LanguageModel for NgramModel {
    fn name(&self) -> &str {
        "ngram"
    }

    fn token_log_probs(&self, words: &[String]) -> Result<Vec<f64>> {
        let mut u = BOS_ID;
        let mut v = BOS_ID;
        let mut out = Vec::with_capacity(words.len() + 1);
        for w in words.iter().map(|w| self.id(w)).chain(std::iter::once(EOS_ID)) {
            out.push(self.prob_id(w, Some(u), Some(v)).ln());
            u = v;
            v = w;
        }
        Ok(out)
    }
}

/// Token-pooled perplexity `exp(-Σ log p / Σ n)` over many sequences.
pub fn perplexity(lm: &dyn LanguageModel, sequences: &[Vec<String>]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in sequences {
        let lp = lm.token_log_probs(s)?;
        sum += lp.iter().sum::<f64>();
        count += lp.len();
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("perplexity of an empty set".into()));
    }
    Ok((-sum / count as f64).exp())
}
