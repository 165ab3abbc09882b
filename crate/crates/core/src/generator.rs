//! Encoder-decoder counterfactual generator trained with teacher forcing.
//!
//! The toy model is a small pre-norm transformer trained from scratch. A
//! minibatch is packed into one long sequence per side and additive
//! block-diagonal masks stop pairs from attending to each other, so no padding
//! is needed.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Gradients, Graph, Matrix, ParamId, ParamStore, Var};
use crate::checkpoint::{self, read_f64s, read_str, write_f64s, write_str};
use crate::corpus::{detokenize, Tokenizer};
use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear};
use crate::rewrite::ParallelPair;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
const PAD_ID: usize = 0;
const UNK_ID: usize = 1;
const BOS_ID: usize = 2;
const EOS_ID: usize = 3;

/// Prefix marking a token written without whitespace before it.
const GLUE: &str = "@@";
const MASKED: f64 = -1e9;

/// Splits text into generator tokens; spacing is folded into the tokens so decoding round-trips.
pub fn text_tokens(text: &str) -> Vec<String> {
    Tokenizer::pre_tokenize(text)
        .into_iter()
        .enumerate()
        .map(|(i, (w, space))| if i == 0 || space { w } else { format!("{GLUE}{w}") })
        .collect()
}

pub fn detokenize_tokens<S: AsRef<str>>(tokens: &[S]) -> String {
    detokenize(tokens.iter().map(|t| match t.as_ref().strip_prefix(GLUE) {
        Some(rest) => (rest, false),
        None => (t.as_ref(), true),
    }))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials first, then every token of `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(text_tokens).collect();
        let tokens = [PAD, UNK, BOS, EOS].into_iter().map(String::from).chain(words).collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Token ids of `text` and the number of tokens mapped to UNK.
    pub fn encode(&self, text: &str) -> (Vec<usize>, usize) {
        let mut unknown = 0;
        let ids = text_tokens(text)
            .iter()
            .map(|t| {
                self.id(t).unwrap_or_else(|| {
                    unknown += 1;
                    UNK_ID
                })
            })
            .collect();
        (ids, unknown)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let tokens: Vec<&str> = ids.iter().map(|&i| self.tokens[i].as_str()).collect();
        detokenize_tokens(&tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorArchitecture {
    pub d_model: usize,
    pub heads: usize,
    pub ffn: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Cap on source tokens and on generated tokens, end marker included.
    pub max_len: usize,
}

impl Default for GeneratorArchitecture {
    fn default() -> Self {
        Self { d_model: 128, heads: 4, ffn: 256, encoder_layers: 2, decoder_layers: 2, max_len: 128 }
    }
}

impl GeneratorArchitecture {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Precondition(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.max_len < 2 || self.ffn == 0 {
            return Err(Error::Precondition("max_len must be at least 2 and ffn positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorTrainConfig {
    pub arch: GeneratorArchitecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Stop once an epoch's mean per-token loss falls below this.
    pub stop_below: f64,
    pub include_no_op: bool,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        Self {
            arch: GeneratorArchitecture::default(),
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            stop_below: 1e-3,
            include_no_op: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMeta {
    pub seed: u64,
    /// Mean per-token loss of each epoch.
    pub loss_history: Vec<f64>,
    pub unknown_tokens: u64,
    pub skipped_pairs: u64,
}

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut lin = |n: &str| Linear::new(store, &format!("{name}.{n}"), d, d, Init::Xavier, rng);
        Self { q: lin("q"), k: lin("k"), v: lin("v"), o: lin("o"), heads }
    }

    fn forward(&self, g: &mut Graph, x: Var, memory: Var, mask: Var) -> Var {
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, memory);
        let v = self.v.forward(g, memory);
        let dh = self.q.output_dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let outs: Vec<Var> = (0..self.heads)
            .map(|h| {
                let cols: Vec<usize> = (h * dh..(h + 1) * dh).collect();
                let qh = g.select_cols(q, &cols);
                let kh = g.select_cols(k, &cols);
                let vh = g.select_cols(v, &cols);
                let kt = g.transpose(kh);
                let scores = g.matmul(qh, kt);
                let scores = g.scale(scores, scale);
                let scores = g.add(scores, mask);
                let weights = g.softmax_rows(scores);
                g.matmul(weights, vh)
            })
            .collect();
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.o.forward(g, cat)
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, Init::Xavier, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, Init::Xavier, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    norm1: LayerNorm,
    self_attn: Attention,
    norm2: LayerNorm,
    cross_attn: Attention,
    norm3: LayerNorm,
    ff: FeedForward,
}

/// Several examples packed side by side, with their attention masks.
struct Packed {
    src_ids: Vec<usize>,
    src_pos: Vec<usize>,
    dec_ids: Vec<usize>,
    dec_pos: Vec<usize>,
    targets: Vec<usize>,
    enc_mask: Matrix,
    self_mask: Matrix,
    cross_mask: Matrix,
}

/// `src` already ends in EOS; `tgt` does not.
fn pack(examples: &[(&[usize], &[usize])]) -> Packed {
    let mut p = Packed {
        src_ids: Vec::new(),
        src_pos: Vec::new(),
        dec_ids: Vec::new(),
        dec_pos: Vec::new(),
        targets: Vec::new(),
        enc_mask: Matrix::zeros((0, 0)),
        self_mask: Matrix::zeros((0, 0)),
        cross_mask: Matrix::zeros((0, 0)),
    };
    let mut src_spans = Vec::new();
    let mut dec_spans = Vec::new();
    for (src, tgt) in examples {
        src_spans.push(p.src_ids.len()..p.src_ids.len() + src.len());
        p.src_ids.extend_from_slice(src);
        p.src_pos.extend(0..src.len());
        dec_spans.push(p.dec_ids.len()..p.dec_ids.len() + tgt.len() + 1);
        p.dec_ids.push(BOS_ID);
        p.dec_ids.extend_from_slice(tgt);
        p.dec_pos.extend(0..=tgt.len());
        p.targets.extend_from_slice(tgt);
        p.targets.push(EOS_ID);
    }
    let (ns, nd) = (p.src_ids.len(), p.dec_ids.len());
    p.enc_mask = Matrix::from_elem((ns, ns), MASKED);
    p.self_mask = Matrix::from_elem((nd, nd), MASKED);
    p.cross_mask = Matrix::from_elem((nd, ns), MASKED);
    for (s, d) in src_spans.iter().zip(&dec_spans) {
        for i in s.clone() {
            for j in s.clone() {
                p.enc_mask[[i, j]] = 0.0;
            }
        }
        for i in d.clone() {
            for j in d.start..=i {
                p.self_mask[[i, j]] = 0.0;
            }
            for j in s.clone() {
                p.cross_mask[[i, j]] = 0.0;
            }
        }
    }
    p
}

/// Trained (or freshly initialised) toy seq2seq model.
#[derive(Debug, Clone)]
pub struct GeneratorModel {
    pub arch: GeneratorArchitecture,
    pub vocab: Vocabulary,
    pub meta: GeneratorMeta,
    params: ParamStore,
    embed: ParamId,
    positions: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    encoder_norm: LayerNorm,
    decoder_norm: LayerNorm,
    output: Linear,
}

/// Anything that rewrites a text into its counterfactual.
pub trait TextGenerator: Send + Sync {
    fn name(&self) -> &str;
    fn generate(&self, text: &str) -> Result<String>;
}

impl GeneratorModel {
    pub fn new(arch: GeneratorArchitecture, vocab: Vocabulary, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = arch.d_model;
        let normal = |rng: &mut ChaCha8Rng, rows: usize| {
            use rand_distr::{Distribution, Normal};
            let n = Normal::new(0.0, 0.1).expect("finite std");
            Matrix::from_shape_simple_fn((rows, d), || n.sample(rng))
        };
        let embed = params.add("embed", normal(&mut rng, vocab.len()));
        let positions = params.add("positions", normal(&mut rng, arch.max_len));
        let encoder = (0..arch.encoder_layers)
            .map(|l| {
                let name = format!("enc{l}");
                EncoderLayer {
                    norm1: LayerNorm::new(&mut params, &format!("{name}.norm1"), d),
                    attn: Attention::new(&mut params, &format!("{name}.attn"), d, arch.heads, &mut rng),
                    norm2: LayerNorm::new(&mut params, &format!("{name}.norm2"), d),
                    ff: FeedForward::new(&mut params, &format!("{name}.ff"), d, arch.ffn, &mut rng),
                }
            })
            .collect();
        let decoder = (0..arch.decoder_layers)
            .map(|l| {
                let name = format!("dec{l}");
                DecoderLayer {
                    norm1: LayerNorm::new(&mut params, &format!("{name}.norm1"), d),
                    self_attn: Attention::new(&mut params, &format!("{name}.self"), d, arch.heads, &mut rng),
                    norm2: LayerNorm::new(&mut params, &format!("{name}.norm2"), d),
                    cross_attn: Attention::new(&mut params, &format!("{name}.cross"), d, arch.heads, &mut rng),
                    norm3: LayerNorm::new(&mut params, &format!("{name}.norm3"), d),
                    ff: FeedForward::new(&mut params, &format!("{name}.ff"), d, arch.ffn, &mut rng),
                }
            })
            .collect();
        let encoder_norm = LayerNorm::new(&mut params, "enc.norm", d);
        let decoder_norm = LayerNorm::new(&mut params, "dec.norm", d);
        // small output weights keep the untrained next-token distribution close to uniform
        let output = Linear::new(&mut params, "output", d, vocab.len(), Init::Normal(0.02), &mut rng);
        let meta = GeneratorMeta { seed, ..Default::default() };
        Ok(Self { arch, vocab, meta, params, embed, positions, encoder, decoder, encoder_norm, decoder_norm, output })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn embed_graph(&self, g: &mut Graph, ids: &[usize], pos: &[usize]) -> Var {
        let table = g.param(self.embed);
        let x = g.gather_rows(table, ids);
        let ptable = g.param(self.positions);
        let p = g.gather_rows(ptable, pos);
        g.add(x, p)
    }

    fn encode_graph(&self, g: &mut Graph, ids: &[usize], pos: &[usize], mask: &Matrix) -> Var {
        let mask = g.input(mask.clone());
        let mut x = self.embed_graph(g, ids, pos);
        for layer in &self.encoder {
            let h = layer.norm1.forward(g, x);
            let a = layer.attn.forward(g, h, h, mask);
            x = g.add(x, a);
            let h = layer.norm2.forward(g, x);
            let f = layer.ff.forward(g, h);
            x = g.add(x, f);
        }
        self.encoder_norm.forward(g, x)
    }

    /// Next-token logits for every decoder position.
    fn decode_graph(&self, g: &mut Graph, memory: Var, ids: &[usize], pos: &[usize], self_mask: &Matrix, cross_mask: &Matrix) -> Var {
        let self_mask = g.input(self_mask.clone());
        let cross_mask = g.input(cross_mask.clone());
        let mut x = self.embed_graph(g, ids, pos);
        for layer in &self.decoder {
            let h = layer.norm1.forward(g, x);
            let a = layer.self_attn.forward(g, h, h, self_mask);
            x = g.add(x, a);
            let h = layer.norm2.forward(g, x);
            let c = layer.cross_attn.forward(g, h, memory, cross_mask);
            x = g.add(x, c);
            let h = layer.norm3.forward(g, x);
            let f = layer.ff.forward(g, h);
            x = g.add(x, f);
        }
        let x = self.decoder_norm.forward(g, x);
        self.output.forward(g, x)
    }

    fn packed_loss(&self, g: &mut Graph, p: &Packed) -> Var {
        let memory = self.encode_graph(g, &p.src_ids, &p.src_pos, &p.enc_mask);
        let logits = self.decode_graph(g, memory, &p.dec_ids, &p.dec_pos, &p.self_mask, &p.cross_mask);
        g.cross_entropy(logits, &p.targets)
    }

    /// Source ids with the end marker, truncated to fit the position table.
    fn source_ids(&self, text: &str) -> (Vec<usize>, usize) {
        let (mut ids, unknown) = self.vocab.encode(text);
        ids.truncate(self.arch.max_len - 1);
        ids.push(EOS_ID);
        (ids, unknown)
    }

    fn target_ids(&self, text: &str) -> Result<(Vec<usize>, usize)> {
        let (ids, unknown) = self.vocab.encode(text);
        if ids.len() + 1 > self.arch.max_len {
            return Err(Error::Precondition(format!("target has {} tokens, max_len is {}", ids.len(), self.arch.max_len)));
        }
        Ok((ids, unknown))
    }

    /// `-Σ_t log P(y_t | y_<t, x)` over the target tokens and the end marker.
    pub fn teacher_forcing_loss(&self, src: &str, tgt: &str) -> Result<f64> {
        let (s, u1) = self.source_ids(src);
        let (t, u2) = self.target_ids(tgt)?;
        if u1 + u2 > 0 {
            log::warn!("{} out-of-vocabulary tokens mapped to {UNK}", u1 + u2);
        }
        let p = pack(&[(&s, &t)]);
        let mut g = Graph::new(&self.params);
        let loss = self.packed_loss(&mut g, &p);
        Ok(g.scalar(loss))
    }

    /// Loss and parameter gradients of one pair.
    pub fn loss_gradients(&self, src: &str, tgt: &str) -> Result<(f64, Gradients)> {
        let (s, _) = self.source_ids(src);
        let (t, _) = self.target_ids(tgt)?;
        let p = pack(&[(&s, &t)]);
        let mut g = Graph::new(&self.params);
        let loss = self.packed_loss(&mut g, &p);
        Ok((g.scalar(loss), g.backward(loss)))
    }

    fn memory(&self, src: &[usize]) -> Matrix {
        let mut g = Graph::new(&self.params);
        let pos: Vec<usize> = (0..src.len()).collect();
        let mask = Matrix::zeros((src.len(), src.len()));
        let m = self.encode_graph(&mut g, src, &pos, &mask);
        g.value(m).clone()
    }

    fn next_logits(&self, memory: &Matrix, prefix: &[usize]) -> Vec<f64> {
        let n = prefix.len();
        let pos: Vec<usize> = (0..n).collect();
        let self_mask = Matrix::from_shape_fn((n, n), |(i, j)| if j <= i { 0.0 } else { MASKED });
        let cross_mask = Matrix::zeros((n, memory.nrows()));
        let mut g = Graph::new(&self.params);
        let mem = g.input(memory.clone());
        let logits = self.decode_graph(&mut g, mem, prefix, &pos, &self_mask, &cross_mask);
        g.value(logits).row(n - 1).to_vec()
    }

    /// Next-token distribution after `prefix` (generator tokens, without the start marker).
    pub fn next_token_distribution(&self, src: &str, prefix: &[String]) -> Vec<f64> {
        let (s, _) = self.source_ids(src);
        let mut ids = vec![BOS_ID];
        ids.extend(prefix.iter().map(|t| self.vocab.id(t).unwrap_or(UNK_ID)));
        let logits = self.next_logits(&self.memory(&s), &ids);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / total).collect()
    }

    /// Greedy decoding; stops at the end marker or after `max_len` steps.
    pub fn generate_ids(&self, text: &str) -> Vec<usize> {
        let (s, _) = self.source_ids(text);
        let memory = self.memory(&s);
        let mut prefix = vec![BOS_ID];
        let mut out = Vec::new();
        for _ in 0..self.arch.max_len {
            let logits = self.next_logits(&memory, &prefix);
            // specials other than the end marker are never emitted
            let best = logits
                .iter()
                .enumerate()
                .filter(|(i, _)| ![PAD_ID, UNK_ID, BOS_ID].contains(i))
                .fold((EOS_ID, f64::NEG_INFINITY), |acc, (i, &l)| if l > acc.1 { (i, l) } else { acc })
                .0;
            if best == EOS_ID {
                break;
            }
            out.push(best);
            prefix.push(best);
        }
        out
    }

    pub fn generate_text(&self, text: &str) -> String {
        self.vocab.decode(&self.generate_ids(text))
    }

    /// Order-preserving parallel generation.
    pub fn generate_all(&self, texts: &[String]) -> Vec<String> {
        texts.par_iter().map(|t| self.generate_text(t)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_atomic(path, |w| self.write_to(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut checkpoint::open(path)?)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        checkpoint::write_header(w, GEN_MAGIC, GEN_VERSION)?;
        let a = &self.arch;
        for v in [a.d_model, a.heads, a.ffn, a.encoder_layers, a.decoder_layers, a.max_len] {
            w.write_u32::<LittleEndian>(v as u32)?;
        }
        w.write_u64::<LittleEndian>(self.meta.seed)?;
        write_f64s(w, &self.meta.loss_history)?;
        w.write_u64::<LittleEndian>(self.meta.unknown_tokens)?;
        w.write_u64::<LittleEndian>(self.meta.skipped_pairs)?;
        w.write_u32::<LittleEndian>(self.vocab.len() as u32)?;
        for t in self.vocab.tokens() {
            write_str(w, t)?;
        }
        checkpoint::write_params(w, &self.params)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        checkpoint::read_header(r, GEN_MAGIC, GEN_VERSION)?;
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>()? as usize;
        }
        let [d_model, heads, ffn, encoder_layers, decoder_layers, max_len] = dims;
        let arch = GeneratorArchitecture { d_model, heads, ffn, encoder_layers, decoder_layers, max_len };
        let seed = r.read_u64::<LittleEndian>()?;
        let loss_history = read_f64s(r)?;
        let unknown_tokens = r.read_u64::<LittleEndian>()?;
        let skipped_pairs = r.read_u64::<LittleEndian>()?;
        let n = r.read_u32::<LittleEndian>()? as usize;
        let tokens = (0..n).map(|_| read_str(r)).collect::<Result<Vec<_>>>()?;
        if tokens.len() < 4 || tokens[..4] != [PAD, UNK, BOS, EOS] {
            return Err(Error::Checkpoint("generator vocabulary lacks the special tokens".into()));
        }
        let mut model = Self::new(arch, Vocabulary::from_tokens(tokens), seed)?;
        model.meta = GeneratorMeta { seed, loss_history, unknown_tokens, skipped_pairs };
        let params = checkpoint::read_params(r)?;
        if params.len() != model.params.len()
            || params.ids().any(|id| params.get(id).raw_dim() != model.params.get(id).raw_dim())
        {
            return Err(Error::Checkpoint("generator parameter shapes do not match architecture".into()));
        }
        model.params = params;
        Ok(model)
    }
}

impl TextGenerator for GeneratorModel {
    fn name(&self) -> &str {
        "toy-seq2seq"
    }

    fn generate(&self, text: &str) -> Result<String> {
        Ok(self.generate_text(text))
    }
}

const GEN_MAGIC: &[u8; 8] = b"FFGEN\0\0\0";
const GEN_VERSION: u32 = 1;

/// `(src, tgt)` training texts; pairs whose substitution changed nothing are dropped unless asked for.
pub fn training_pairs(pairs: &[ParallelPair], include_no_op: bool) -> Vec<(String, String)> {
    pairs
        .iter()
        .filter(|p| include_no_op || !p.no_op)
        .map(|p| (p.src.clone(), p.tgt.clone()))
        .collect()
}

/// Builds a vocabulary over the pairs and trains a fresh model on them.
pub fn train_generator(pairs: &[(String, String)], cfg: &GeneratorTrainConfig) -> Result<GeneratorModel> {
    if pairs.is_empty() {
        return Err(Error::Precondition("generator training needs at least one pair".into()));
    }
    let vocab = Vocabulary::build(pairs.iter().flat_map(|(s, t)| [s.as_str(), t.as_str()]));
    let model = GeneratorModel::new(cfg.arch, vocab, cfg.seed)?;
    finetune(model, pairs, cfg)
}

/// Teacher-forced training with Adam on per-token mean loss.
pub fn finetune(mut model: GeneratorModel, pairs: &[(String, String)], cfg: &GeneratorTrainConfig) -> Result<GeneratorModel> {
    if pairs.is_empty() {
        return Err(Error::Precondition("generator training needs at least one pair".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Precondition("batch_size and epochs must be positive".into()));
    }
    let mut examples = Vec::new();
    for (src, tgt) in pairs {
        let (t, u2) = match model.target_ids(tgt) {
            Ok(t) => t,
            Err(_) => {
                model.meta.skipped_pairs += 1;
                continue;
            }
        };
        let (s, u1) = model.source_ids(src);
        model.meta.unknown_tokens += (u1 + u2) as u64;
        examples.push((s, t));
    }
    if model.meta.skipped_pairs > 0 {
        log::warn!("skipped {} pairs longer than max_len", model.meta.skipped_pairs);
    }
    if model.meta.unknown_tokens > 0 {
        log::warn!("{} out-of-vocabulary tokens mapped to {UNK}", model.meta.unknown_tokens);
    }
    if examples.is_empty() {
        return Err(Error::Precondition("no pair fits within max_len".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e4e);
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut tokens) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[usize], &[usize])> =
                chunk.iter().map(|&i| (examples[i].0.as_slice(), examples[i].1.as_slice())).collect();
            let packed = pack(&batch);
            let n = packed.targets.len();
            let (loss, mut grads) = {
                let mut g = Graph::new(&model.params);
                let loss = model.packed_loss(&mut g, &packed);
                (g.scalar(loss), g.backward(loss))
            };
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            grads.scale(1.0 / n as f64);
            adam.step(&mut model.params, &grads);
            total += loss;
            tokens += n;
        }
        let mean = total / tokens as f64;
        model.meta.loss_history.push(mean);
        log::debug!("generator epoch {epoch}: loss {mean:.5}");
        if mean < cfg.stop_below {
            break;
        }
    }
    Ok(model)
}
