//! Contextual embedding backends and the on-disk embedding cache.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, RwLock};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, read_str, write_str};
use crate::corpus::{case_fold, Attribute, Occurrence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextualEmbedding {
    pub occurrence: Occurrence,
    pub vector: Vec<f64>,
    /// Set when the context window exceeded the backend limit and was cut.
    pub truncated: bool,
}

/// Source of context-specific word vectors.
pub trait EmbeddingBackend: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn deterministic(&self) -> bool;
    fn embed(&self, occurrence: &Occurrence) -> Result<ContextualEmbedding>;
}

/// Embeds every occurrence, in order.
pub fn embed_all(backend: &dyn EmbeddingBackend, occurrences: &[Occurrence]) -> Result<Vec<ContextualEmbedding>> {
    occurrences.iter().map(|o| backend.embed(o)).collect()
}

/// Keeps at most `max` context tokens around `position`.
pub fn truncate_context(context: &[String], position: usize, max: usize) -> (&[String], usize, bool) {
    if context.len() <= max {
        return (context, position, false);
    }
    let half = max / 2;
    let start = position.saturating_sub(half).min(context.len() - max);
    (&context[start..start + max], position - start, true)
}

/// A word planted with an attribute signal in the toy backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedWord {
    pub word: String,
    /// Words sharing a concept share their base vector and differ only in the attribute sign.
    pub concept: String,
    pub group: Attribute,
}

/// Reads `word<TAB>concept<TAB>group` lines.
pub fn read_planted(path: &Path) -> Result<Vec<PlantedWord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::parse(path, i + 1, format!("expected 3 columns, found {}", cols.len())));
        }
        let group = cols[2].parse().map_err(|e: String| Error::parse(path, i + 1, e))?;
        out.push(PlantedWord { word: case_fold(cols[0]), concept: cols[1].to_string(), group });
    }
    Ok(out)
}

pub fn write_planted(path: &Path, planted: &[PlantedWord]) -> Result<()> {
    checkpoint::write_atomic(path, |w| {
        for p in planted {
            writeln!(w, "{}\t{}\t{}", p.word, p.concept, p.group)?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyBackendConfig {
    pub dim: usize,
    pub seed: u64,
    pub context_weight: f64,
    pub attribute_strength: f64,
    pub word_noise: f64,
    pub max_context: usize,
}

impl Default for ToyBackendConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            seed: 17,
            context_weight: 0.3,
            attribute_strength: 1.0,
            word_noise: 0.2,
            max_context: 512,
        }
    }
}

/// Hermetic deterministic backend.
///
/// `embed(w, ctx) = base(w) + context_weight * mean(ctx_vec(c) for c in ctx, c != w)`
/// where `base(w)` is a hash-seeded unit vector, except for planted words whose
/// base is `concept(w) + word_noise * own(w) ± attribute_strength * u`. Every
/// hashed vector is orthogonal to the attribute direction `u`, so the only
/// attribute signal is the planted one.
pub struct ToyBackend {
    config: ToyBackendConfig,
    planted: HashMap<String, (String, Attribute)>,
    direction: Vec<f64>,
    memo: RwLock<HashMap<(u8, String), Arc<Vec<f64>>>>,
}

fn hashed_unit(seed: u64, tag: &str, key: &str, dim: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update([0u8]);
    h.update(key.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

impl ToyBackend {
    pub fn new(config: ToyBackendConfig, planted: &[PlantedWord]) -> Result<Self> {
        if config.dim < 2 {
            return Err(Error::Precondition("toy backend needs dim >= 2".into()));
        }
        let direction = hashed_unit(config.seed, "attribute-direction", "", config.dim);
        let planted = planted
            .iter()
            .map(|p| (case_fold(&p.word), (p.concept.clone(), p.group)))
            .collect();
        Ok(Self { config, planted, direction, memo: RwLock::new(HashMap::new()) })
    }

    pub fn config(&self) -> &ToyBackendConfig {
        &self.config
    }

    pub fn attribute_direction(&self) -> &[f64] {
        &self.direction
    }

    fn orthogonal_unit(&self, kind: u8, tag: &str, key: &str) -> Arc<Vec<f64>> {
        let memo_key = (kind, key.to_string());
        if let Some(v) = self.memo.read().expect("memo lock").get(&memo_key) {
            return v.clone();
        }
        let mut v = hashed_unit(self.config.seed, tag, key, self.config.dim);
        let proj: f64 = v.iter().zip(&self.direction).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(&self.direction).for_each(|(x, d)| *x -= proj * d);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        let v = Arc::new(v);
        self.memo.write().expect("memo lock").insert(memo_key, v.clone());
        v
    }

    /// Context-free vector of a word.
    pub fn static_vector(&self, word: &str) -> Vec<f64> {
        let key = case_fold(word);
        match self.planted.get(&key) {
            Some((concept, group)) => {
                let base = self.orthogonal_unit(0, "concept", concept);
                let own = self.orthogonal_unit(1, "word", &key);
                let sign = if *group == Attribute::A { 1.0 } else { -1.0 };
                let s = self.config.attribute_strength * sign;
                (0..self.config.dim)
                    .map(|i| base[i] + self.config.word_noise * own[i] + s * self.direction[i])
                    .collect()
            }
            None => self.orthogonal_unit(2, "plain", &key).to_vec(),
        }
    }

    pub fn embed_window(&self, word: &str, context: &[String], position: usize) -> Vec<f64> {
        let mut v = self.static_vector(word);
        let others: Vec<&String> = context
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != position)
            .map(|(_, c)| c)
            .collect();
        if !others.is_empty() {
            let w = self.config.context_weight / others.len() as f64;
            for c in others {
                let cv = self.orthogonal_unit(3, "context", &case_fold(c));
                v.iter_mut().zip(cv.iter()).for_each(|(x, c)| *x += w * c);
            }
        }
        v
    }
}

impl EmbeddingBackend for ToyBackend {
    fn name(&self) -> &str {
        "toy"
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn embed(&self, occurrence: &Occurrence) -> Result<ContextualEmbedding> {
        let (context, position, truncated) =
            truncate_context(&occurrence.context, occurrence.position, self.config.max_context);
        if truncated {
            log::debug!("context of {:?} truncated to {}", occurrence.word, self.config.max_context);
        }
        Ok(ContextualEmbedding {
            occurrence: occurrence.clone(),
            vector: self.embed_window(&occurrence.word, context, position),
            truncated,
        })
    }
}

const CACHE_MAGIC: &[u8; 8] = b"FFEMBED\0";
const CACHE_VERSION: u32 = 1;

/// Fixed-width embedding records keyed by `(doc_id, token_index)`.
///
/// Layout: header (magic, version, backend name, `d`, record count), then the
/// document-id table, then records of `u32 doc ordinal, u32 token index, d x f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub backend: String,
    pub dim: usize,
    pub vectors: BTreeMap<(String, usize), Vec<f64>>,
}

impl EmbeddingCache {
    pub fn new(backend: impl Into<String>, dim: usize) -> Self {
        Self { backend: backend.into(), dim, vectors: BTreeMap::new() }
    }

    pub fn insert(&mut self, embedding: &ContextualEmbedding) -> Result<()> {
        if embedding.vector.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: embedding.vector.len() });
        }
        let key = (embedding.occurrence.doc_id.clone(), embedding.occurrence.token_index);
        self.vectors.insert(key, embedding.vector.clone());
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        checkpoint::write_header(w, CACHE_MAGIC, CACHE_VERSION)?;
        write_str(w, &self.backend)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u64::<LittleEndian>(self.vectors.len() as u64)?;
        let mut doc_ids: Vec<&String> = self.vectors.keys().map(|(d, _)| d).collect();
        doc_ids.dedup();
        let ordinal: HashMap<&String, u32> =
            doc_ids.iter().enumerate().map(|(i, d)| (*d, i as u32)).collect();
        w.write_u32::<LittleEndian>(doc_ids.len() as u32)?;
        for d in &doc_ids {
            write_str(w, d)?;
        }
        for ((doc, token), v) in &self.vectors {
            w.write_u32::<LittleEndian>(ordinal[doc])?;
            w.write_u32::<LittleEndian>(*token as u32)?;
            for &x in v {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        checkpoint::read_header(r, CACHE_MAGIC, CACHE_VERSION)?;
        let backend = read_str(r)?;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let count = r.read_u64::<LittleEndian>()? as usize;
        let n_docs = r.read_u32::<LittleEndian>()? as usize;
        let doc_ids = (0..n_docs).map(|_| read_str(r)).collect::<Result<Vec<_>>>()?;
        let mut vectors = BTreeMap::new();
        for _ in 0..count {
            let doc = r.read_u32::<LittleEndian>()? as usize;
            let token = r.read_u32::<LittleEndian>()? as usize;
            let v = (0..dim).map(|_| r.read_f64::<LittleEndian>()).collect::<std::io::Result<Vec<_>>>()?;
            let doc_id = doc_ids
                .get(doc)
                .ok_or_else(|| Error::Checkpoint(format!("record references unknown document {doc}")))?;
            vectors.insert((doc_id.clone(), token), v);
        }
        Ok(Self { backend, dim, vectors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_atomic(path, |w| self.write_to(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut checkpoint::open(path)?)
    }
}

/// Serves precomputed vectors, e.g. exported from an external pretrained encoder.
pub struct CachedBackend {
    name: String,
    cache: EmbeddingCache,
}

impl CachedBackend {
    pub fn new(cache: EmbeddingCache) -> Self {
        Self { name: format!("cache:{}", cache.backend), cache }
    }
}

impl EmbeddingBackend for CachedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.cache.dim
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn embed(&self, occurrence: &Occurrence) -> Result<ContextualEmbedding> {
        let key = (occurrence.doc_id.clone(), occurrence.token_index);
        let vector = self.cache.vectors.get(&key).cloned().ok_or_else(|| {
            Error::backend(
                &self.name,
                format!("no cached vector for ({}, {})", occurrence.doc_id, occurrence.token_index),
            )
        })?;
        Ok(ContextualEmbedding { occurrence: occurrence.clone(), vector, truncated: false })
    }
}
