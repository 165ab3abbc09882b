//! Invertible interpretation flow.
//!
//! The flow `T` maps an embedding `z` to an interpretable vector `z̃` whose
//! first `k` dimensions carry the attribute and whose remaining dimensions are
//! pushed towards a standard Gaussian. Counterfactual embeddings are obtained
//! by overwriting the first `k` dimensions of `T(z)` with the prototype of the
//! target group and inverting.
//!
//! Each block is an affine coupling: a fixed subset of coordinates conditions
//! a small GELU network whose outputs scale (`c * tanh(raw / c)`) and shift the
//! complementary subset. Blocks alternate between a random partition and its
//! complement so every coordinate is transformed. The network's last layer
//! starts at zero, so a freshly built flow is exactly the identity.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Adam, Gradients, Graph, Matrix, ParamStore, Var};
use crate::checkpoint::{self, read_f64s, read_str, read_usizes, write_f64s, write_str, write_usizes};
use crate::corpus::{is_word_like, Attribute, TokenizedCorpus, DEFAULT_CONTEXT_WINDOW};
use crate::embedding::{embed_all, EmbeddingBackend};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear};

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowArchitecture {
    pub dim: usize,
    pub depth: usize,
    /// Coupling-network width; defaults to `2 * dim`.
    pub hidden: Option<usize>,
    pub scale_clamp: f64,
    pub seed: u64,
}

impl Default for FlowArchitecture {
    fn default() -> Self {
        Self { dim: 0, depth: 6, hidden: None, scale_clamp: 2.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct CouplingBlock {
    conditioning: Vec<usize>,
    transformed: Vec<usize>,
    /// Maps `[conditioning, transformed]` order back to natural order.
    restore: Vec<usize>,
    hidden1: Linear,
    hidden2: Linear,
    output: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl Prototypes {
    pub fn get(&self, side: Attribute) -> &[f64] {
        match side {
            Attribute::A => &self.a,
            Attribute::B => &self.b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowMeta {
    pub sigma: f64,
    /// How `k` was chosen.
    pub k_rule: String,
    pub initial_loss: f64,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub arch: FlowArchitecture,
    pub k: usize,
    pub prototypes: Option<Prototypes>,
    pub meta: FlowMeta,
    params: ParamStore,
    blocks: Vec<CouplingBlock>,
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Matrix {
    let dim = rows.first().map_or(0, Vec::len);
    let mut m = Matrix::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).iter_mut().zip(r).for_each(|(a, &b)| *a = b);
    }
    m
}

/// `‖u2 - σ u1‖² / (1 - σ²)`, the correlation term of the pair loss.
pub fn correlation_penalty(u2_k: &[f64], u1_k: &[f64], sigma: f64) -> f64 {
    let sq: f64 = u2_k.iter().zip(u1_k).map(|(b, a)| (b - sigma * a).powi(2)).sum();
    sq / (1.0 - sigma * sigma)
}

/// Overwrites the first `prototype.len()` coordinates of `z_tilde`.
pub fn swap_attribute(z_tilde: &[f64], prototype: &[f64]) -> Vec<f64> {
    let mut out = z_tilde.to_vec();
    out[..prototype.len()].copy_from_slice(prototype);
    out
}

impl FlowModel {
    /// Identity-initialised flow with `k` attribute dimensions.
    pub fn new(arch: FlowArchitecture, k: usize) -> Result<Self> {
        let d = arch.dim;
        if d < 2 {
            return Err(Error::Precondition(format!("flow needs dim >= 2, got {d}")));
        }
        if k < 1 || k >= d {
            return Err(Error::Precondition(format!("k must satisfy 1 <= k < {d}, got {k}")));
        }
        if arch.depth == 0 {
            return Err(Error::Precondition("flow depth must be positive".into()));
        }
        let hidden = arch.hidden.unwrap_or(2 * d);
        let mut rng = ChaCha8Rng::seed_from_u64(arch.seed);
        let mut params = ParamStore::new();
        let mut blocks = Vec::with_capacity(arch.depth);
        let mut partition: Vec<usize> = Vec::new();
        for i in 0..arch.depth {
            let (conditioning, transformed) = if i % 2 == 0 {
                partition = (0..d).collect();
                partition.shuffle(&mut rng);
                let (c, t) = partition.split_at(d / 2);
                (c.to_vec(), t.to_vec())
            } else {
                let (c, t) = partition.split_at(d / 2);
                (t.to_vec(), c.to_vec())
            };
            let order: Vec<usize> = conditioning.iter().chain(&transformed).copied().collect();
            let mut restore = vec![0; d];
            for (pos, &col) in order.iter().enumerate() {
                restore[col] = pos;
            }
            let name = format!("block{i}");
            let hidden1 =
                Linear::new(&mut params, &format!("{name}.h1"), conditioning.len(), hidden, Init::Xavier, &mut rng);
            let hidden2 = Linear::new(&mut params, &format!("{name}.h2"), hidden, hidden, Init::Xavier, &mut rng);
            let output = Linear::new(
                &mut params,
                &format!("{name}.out"),
                hidden,
                2 * transformed.len(),
                Init::Zeros,
                &mut rng,
            );
            blocks.push(CouplingBlock { conditioning, transformed, restore, hidden1, hidden2, output });
        }
        Ok(Self {
            arch,
            k,
            prototypes: None,
            meta: FlowMeta { sigma: 0.0, k_rule: "fixed".into(), initial_loss: f64::NAN, loss_history: Vec::new() },
            params,
            blocks,
        })
    }

    pub fn dim(&self) -> usize {
        self.arch.dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_dim(&self, cols: usize) -> Result<()> {
        if cols != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: cols });
        }
        Ok(())
    }

    /// Scale and shift of the transformed half, from the conditioning half.
    fn coupling<'a>(&self, g: &mut Graph<'a>, block: &CouplingBlock, cond: Var) -> (Var, Var) {
        let m = block.transformed.len();
        let h = block.hidden1.forward(g, cond);
        let h = g.gelu(h);
        let h = block.hidden2.forward(g, h);
        let h = g.gelu(h);
        let out = block.output.forward(g, h);
        let raw: Vec<usize> = (0..m).collect();
        let shift: Vec<usize> = (m..2 * m).collect();
        let raw = g.select_cols(out, &raw);
        let c = self.arch.scale_clamp;
        let s = g.scale(raw, 1.0 / c);
        let s = g.tanh(s);
        let s = g.scale(s, c);
        let t = g.select_cols(out, &shift);
        (s, t)
    }

    /// Records `T` on a batch; returns the output and per-row log-determinants (`n x 1`).
    pub fn forward_graph<'a>(&self, g: &mut Graph<'a>, x: Var) -> Result<(Var, Var)> {
        let n = g.value(x).nrows();
        let mut x = x;
        let mut logdet: Option<Var> = None;
        for (layer, block) in self.blocks.iter().enumerate() {
            let cond = g.select_cols(x, &block.conditioning);
            let rest = g.select_cols(x, &block.transformed);
            let (s, t) = self.coupling(g, block, cond);
            let es = g.exp(s);
            let scaled = g.mul(rest, es);
            let moved = g.add(scaled, t);
            let joined = g.concat_cols(&[cond, moved]);
            x = g.select_cols(joined, &block.restore);
            if !g.value(x).iter().all(|v| v.is_finite()) {
                return Err(Error::NumericOverflow { layer });
            }
            let ones = g.input(Matrix::ones((block.transformed.len(), 1)));
            let ld = g.matmul(s, ones);
            logdet = Some(match logdet {
                Some(acc) => g.add(acc, ld),
                None => ld,
            });
        }
        let logdet = logdet.unwrap_or_else(|| g.input(Matrix::zeros((n, 1))));
        Ok((x, logdet))
    }

    pub fn forward_batch(&self, z: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        self.check_dim(z.ncols())?;
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::Precondition("flow input must be finite".into()));
        }
        let mut g = Graph::new(&self.params);
        let x = g.input(z.clone());
        let (out, logdet) = self.forward_graph(&mut g, x)?;
        Ok((g.value(out).clone(), g.value(logdet).column(0).to_vec()))
    }

    /// `T(z)` and `log |det dT/dz|`.
    pub fn forward(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (out, logdet) = self.forward_batch(&rows_to_matrix(&[z.to_vec()]))?;
        Ok((out.row(0).to_vec(), logdet[0]))
    }

    pub fn inverse_batch(&self, z_tilde: &Matrix) -> Result<Matrix> {
        self.check_dim(z_tilde.ncols())?;
        let mut g = Graph::new(&self.params);
        let mut y = g.input(z_tilde.clone());
        for (layer, block) in self.blocks.iter().enumerate().rev() {
            let cond = g.select_cols(y, &block.conditioning);
            let moved = g.select_cols(y, &block.transformed);
            let (s, t) = self.coupling(&mut g, block, cond);
            let unshifted = g.sub(moved, t);
            let neg = g.scale(s, -1.0);
            let inv_scale = g.exp(neg);
            let rest = g.mul(unshifted, inv_scale);
            let joined = g.concat_cols(&[cond, rest]);
            y = g.select_cols(joined, &block.restore);
            if !g.value(y).iter().all(|v| v.is_finite()) {
                return Err(Error::NumericOverflow { layer });
            }
        }
        Ok(g.value(y).clone())
    }

    pub fn inverse(&self, z_tilde: &[f64]) -> Result<Vec<f64>> {
        Ok(self.inverse_batch(&rows_to_matrix(&[z_tilde.to_vec()]))?.row(0).to_vec())
    }

    /// Change-of-variables log-density under a standard Gaussian base.
    pub fn log_likelihood(&self, z: &[f64]) -> Result<f64> {
        let (out, logdet) = self.forward(z)?;
        let sq: f64 = out.iter().map(|v| v * v).sum();
        Ok(-0.5 * (sq + self.dim() as f64 * LOG_2PI) + logdet)
    }

    /// Mean pair loss over a batch of same-group pairs (rows of `z1`, `z2`).
    ///
    /// `‖T(z1)‖² - log|J(z1)| + ‖T(z2)_{D∖K}‖² - log|J(z2)| + ‖T(z2)_K - σ T(z1)_K‖² / (1 - σ²)`
    pub fn pair_loss_graph<'a>(&self, g: &mut Graph<'a>, z1: &Matrix, z2: &Matrix, sigma: f64) -> Result<Var> {
        let n = z1.nrows() as f64;
        let d = self.dim();
        let k = self.k;
        let x1 = g.input(z1.clone());
        let x2 = g.input(z2.clone());
        let (u1, ld1) = self.forward_graph(g, x1)?;
        let (u2, ld2) = self.forward_graph(g, x2)?;
        let attr: Vec<usize> = (0..k).collect();
        let rest: Vec<usize> = (k..d).collect();
        let sq1 = g.square(u1);
        let full1 = g.sum(sq1);
        let u2_rest = g.select_cols(u2, &rest);
        let sq2 = g.square(u2_rest);
        let rest2 = g.sum(sq2);
        let u1_k = g.select_cols(u1, &attr);
        let u2_k = g.select_cols(u2, &attr);
        let pulled = g.scale(u1_k, sigma);
        let diff = g.sub(u2_k, pulled);
        let diff_sq = g.square(diff);
        let corr = g.sum(diff_sq);
        let corr = g.scale(corr, 1.0 / (1.0 - sigma * sigma));
        let ld1 = g.sum(ld1);
        let ld2 = g.sum(ld2);
        let quad = g.add(full1, rest2);
        let quad = g.add(quad, corr);
        let lds = g.add(ld1, ld2);
        let total = g.sub(quad, lds);
        Ok(g.scale(total, 1.0 / n))
    }

    pub fn pair_loss(&self, z1: &Matrix, z2: &Matrix, sigma: f64) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let loss = self.pair_loss_graph(&mut g, z1, z2, sigma)?;
        Ok(g.scalar(loss))
    }

    pub fn pair_loss_gradients(&self, z1: &Matrix, z2: &Matrix, sigma: f64) -> Result<(f64, Gradients)> {
        let mut g = Graph::new(&self.params);
        let loss = self.pair_loss_graph(&mut g, z1, z2, sigma)?;
        Ok((g.scalar(loss), g.backward(loss)))
    }

    fn require_prototypes(&self) -> Result<&Prototypes> {
        self.prototypes.as_ref().ok_or(Error::NotFitted("flow prototypes have not been computed"))
    }

    /// Sets prototypes to per-group means of the first `k` interpretable dimensions (over instances).
    pub fn fit_prototypes(&mut self, vectors: &[Vec<f64>], labels: &[Attribute]) -> Result<()> {
        let (out, _) = self.forward_batch(&rows_to_matrix(vectors))?;
        let mut sums = [vec![0.0; self.k], vec![0.0; self.k]];
        let mut counts = [0usize; 2];
        for (row, label) in out.rows().into_iter().zip(labels) {
            let i = label.index();
            counts[i] += 1;
            sums[i].iter_mut().zip(row.iter()).for_each(|(s, &v)| *s += v);
        }
        if counts.contains(&0) {
            return Err(Error::Precondition("prototypes need instances from both groups".into()));
        }
        let [a, b] = sums;
        let mean = |v: Vec<f64>, n: usize| v.into_iter().map(|s| s / n as f64).collect();
        self.prototypes = Some(Prototypes { a: mean(a, counts[0]), b: mean(b, counts[1]) });
        Ok(())
    }

    /// `T⁻¹` of `T(z)` with its attribute block replaced by the target group's prototype.
    pub fn counterfactual_batch(&self, z: &Matrix, target: Attribute) -> Result<Matrix> {
        let proto = self.require_prototypes()?.get(target).to_vec();
        let (mut out, _) = self.forward_batch(z)?;
        for mut row in out.rows_mut() {
            row.iter_mut().zip(&proto).for_each(|(v, &p)| *v = p);
        }
        self.inverse_batch(&out)
    }

    pub fn counterfactual_embedding(&self, z: &[f64], target: Attribute) -> Result<Vec<f64>> {
        Ok(self.counterfactual_batch(&rows_to_matrix(&[z.to_vec()]), target)?.row(0).to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_atomic(path, |w| self.write_to(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut checkpoint::open(path)?)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        checkpoint::write_header(w, FLOW_MAGIC, FLOW_VERSION)?;
        w.write_u32::<LittleEndian>(self.arch.dim as u32)?;
        w.write_u32::<LittleEndian>(self.arch.depth as u32)?;
        w.write_u32::<LittleEndian>(self.arch.hidden.unwrap_or(0) as u32)?;
        w.write_f64::<LittleEndian>(self.arch.scale_clamp)?;
        w.write_u64::<LittleEndian>(self.arch.seed)?;
        w.write_u32::<LittleEndian>(self.k as u32)?;
        w.write_f64::<LittleEndian>(self.meta.sigma)?;
        write_str(w, &self.meta.k_rule)?;
        w.write_f64::<LittleEndian>(self.meta.initial_loss)?;
        write_f64s(w, &self.meta.loss_history)?;
        match &self.prototypes {
            Some(p) => {
                w.write_u8(1)?;
                write_f64s(w, &p.a)?;
                write_f64s(w, &p.b)?;
            }
            None => w.write_u8(0)?,
        }
        for block in &self.blocks {
            write_usizes(w, &block.conditioning)?;
            write_usizes(w, &block.transformed)?;
        }
        checkpoint::write_params(w, &self.params)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        checkpoint::read_header(r, FLOW_MAGIC, FLOW_VERSION)?;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let depth = r.read_u32::<LittleEndian>()? as usize;
        let hidden = match r.read_u32::<LittleEndian>()? as usize {
            0 => None,
            h => Some(h),
        };
        let scale_clamp = r.read_f64::<LittleEndian>()?;
        let seed = r.read_u64::<LittleEndian>()?;
        let k = r.read_u32::<LittleEndian>()? as usize;
        let mut model = Self::new(FlowArchitecture { dim, depth, hidden, scale_clamp, seed }, k)?;
        model.meta.sigma = r.read_f64::<LittleEndian>()?;
        model.meta.k_rule = read_str(r)?;
        model.meta.initial_loss = r.read_f64::<LittleEndian>()?;
        model.meta.loss_history = read_f64s(r)?;
        if r.read_u8()? == 1 {
            let a = read_f64s(r)?;
            let b = read_f64s(r)?;
            model.prototypes = Some(Prototypes { a, b });
        }
        for block in &model.blocks {
            if read_usizes(r)? != block.conditioning || read_usizes(r)? != block.transformed {
                return Err(Error::Checkpoint("flow partitions do not match architecture seed".into()));
            }
        }
        let params = checkpoint::read_params(r)?;
        if params.len() != model.params.len()
            || params.ids().any(|id| params.get(id).raw_dim() != model.params.get(id).raw_dim())
        {
            return Err(Error::Checkpoint("flow parameter shapes do not match architecture".into()));
        }
        model.params = params;
        Ok(model)
    }
}

const FLOW_MAGIC: &[u8; 8] = b"FFFLOW\0\0";
const FLOW_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowTrainConfig {
    /// Same-group correlation in the attribute block, strictly inside (0, 1).
    pub sigma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub depth: usize,
    pub hidden: Option<usize>,
    pub scale_clamp: f64,
    /// Std of Gaussian jitter added to every training vector each time it is drawn.
    pub input_noise: f64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            sigma: 0.9,
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            depth: 6,
            hidden: None,
            scale_clamp: 2.0,
            input_noise: 0.0,
        }
    }
}

impl FlowTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(Error::Precondition(format!("sigma must lie in (0, 1), got {}", self.sigma)));
        }
        if self.batch_size == 0 {
            return Err(Error::Precondition("batch size must be positive".into()));
        }
        if !(self.input_noise >= 0.0 && self.input_noise.is_finite()) {
            return Err(Error::Precondition(format!("input noise must be finite and non-negative, got {}", self.input_noise)));
        }
        Ok(())
    }

    fn architecture(&self, dim: usize) -> FlowArchitecture {
        FlowArchitecture { dim, depth: self.depth, hidden: self.hidden, scale_clamp: self.scale_clamp, seed: self.seed }
    }
}

fn check_labeled(vectors: &[Vec<f64>], labels: &[Attribute]) -> Result<usize> {
    if vectors.len() != labels.len() {
        return Err(Error::LengthMismatch(format!("{} vectors but {} labels", vectors.len(), labels.len())));
    }
    if !(labels.contains(&Attribute::A) && labels.contains(&Attribute::B)) {
        return Err(Error::Precondition("flow training needs instances of both groups".into()));
    }
    let dim = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, got: v.len() });
    }
    Ok(dim)
}

/// Uniform random same-group pairing: every instance is paired with a
/// partner drawn by a per-group shuffle.
fn draw_pairs(labels: &[Attribute], rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(labels.len());
    for side in [Attribute::A, Attribute::B] {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == side).collect();
        let mut partners = members.clone();
        partners.shuffle(rng);
        pairs.extend(members.into_iter().zip(partners));
    }
    pairs.shuffle(rng);
    pairs
}

fn gather(vectors: &[Vec<f64>], idx: impl Iterator<Item = usize>) -> Matrix {
    let rows: Vec<Vec<f64>> = idx.map(|i| vectors[i].clone()).collect();
    rows_to_matrix(&rows)
}

/// Trains the flow with the pair loss and fits the group prototypes.
pub fn train_flow(vectors: &[Vec<f64>], labels: &[Attribute], k: usize, config: &FlowTrainConfig) -> Result<FlowModel> {
    config.validate()?;
    let dim = check_labeled(vectors, labels)?;
    let mut model = FlowModel::new(config.architecture(dim), k)?;
    model.meta.sigma = config.sigma;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut opt = Adam::new(&model.params, config.learning_rate);

    let mut pairs = draw_pairs(labels, &mut rng);
    let z1 = gather(vectors, pairs.iter().map(|p| p.0));
    let z2 = gather(vectors, pairs.iter().map(|p| p.1));
    model.meta.initial_loss = model.pair_loss(&z1, &z2, config.sigma)?;

    for epoch in 1..=config.epochs {
        if epoch > 1 {
            pairs = draw_pairs(labels, &mut rng);
        }
        let mut total = 0.0;
        for batch in pairs.chunks(config.batch_size) {
            let mut z1 = gather(vectors, batch.iter().map(|p| p.0));
            let mut z2 = gather(vectors, batch.iter().map(|p| p.1));
            if config.input_noise > 0.0 {
                let noise = Normal::new(0.0, config.input_noise).expect("validated std");
                z1.mapv_inplace(|v| v + noise.sample(&mut rng));
                z2.mapv_inplace(|v| v + noise.sample(&mut rng));
            }
            let (loss, grads) = match model.pair_loss_gradients(&z1, &z2, config.sigma) {
                Ok(v) => v,
                Err(Error::NumericOverflow { .. }) => return Err(Error::TrainingDiverged { epoch }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            total += loss * batch.len() as f64;
            opt.step(&mut model.params, &grads);
        }
        let mean = total / pairs.len() as f64;
        model.meta.loss_history.push(mean);
        if epoch == 1 || epoch % 10 == 0 {
            log::debug!("flow epoch {epoch}: loss {mean:.4}");
        }
    }
    model.fit_prototypes(vectors, labels)?;
    Ok(model)
}

/// Between-group over within-group variance of each column.
pub fn variance_ratios(rows: &Matrix, labels: &[Attribute]) -> Vec<f64> {
    let n = rows.nrows() as f64;
    (0..rows.ncols())
        .map(|c| {
            let col = rows.column(c);
            let mean = col.sum() / n;
            let mut group_sum = [0.0; 2];
            let mut group_n = [0.0; 2];
            for (v, l) in col.iter().zip(labels) {
                group_sum[l.index()] += v;
                group_n[l.index()] += 1.0;
            }
            let group_mean = [group_sum[0] / group_n[0], group_sum[1] / group_n[1]];
            let between: f64 =
                (0..2).map(|g| group_n[g] * (group_mean[g] - mean).powi(2)).sum::<f64>() / n;
            let within: f64 = col
                .iter()
                .zip(labels)
                .map(|(v, l)| (v - group_mean[l.index()]).powi(2))
                .sum::<f64>()
                / n;
            if within > 0.0 {
                between / within
            } else if between > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .collect()
}

pub const K_RATIO_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct KEstimate {
    pub k: usize,
    /// Variance ratios of the preliminary flow's output dimensions, sorted descending.
    pub ranked_ratios: Vec<f64>,
    pub rule: String,
}

/// Estimates the attribute dimensionality.
///
/// A preliminary flow with `k = max(candidates)` is trained; its output
/// dimensions are ranked by between/within-group variance ratio and `k` is
/// the number above [`K_RATIO_THRESHOLD`], clamped into `candidates`.
pub fn estimate_k(
    vectors: &[Vec<f64>],
    labels: &[Attribute],
    candidates: RangeInclusive<usize>,
    config: &FlowTrainConfig,
) -> Result<KEstimate> {
    let dim = check_labeled(vectors, labels)?;
    let lo = (*candidates.start()).max(1);
    let hi = (*candidates.end()).min(dim - 1);
    if lo > hi {
        return Err(Error::Precondition(format!("empty k range {lo}..={hi} for dim {dim}")));
    }
    let m = rows_to_matrix(vectors);
    let total_var: f64 = (0..dim)
        .map(|c| {
            let col = m.column(c);
            let mean = col.sum() / col.len() as f64;
            col.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
        })
        .sum();
    if total_var <= 0.0 {
        return Err(Error::DegenerateData("embeddings have zero variance".into()));
    }
    let preliminary = train_flow(vectors, labels, hi, config)?;
    let (out, _) = preliminary.forward_batch(&m)?;
    let mut ranked = variance_ratios(&out, labels);
    ranked.sort_by(|a, b| b.total_cmp(a));
    let above = ranked.iter().filter(|&&r| r > K_RATIO_THRESHOLD).count();
    let k = above.clamp(lo, hi);
    Ok(KEstimate {
        k,
        ranked_ratios: ranked,
        rule: format!("variance-ratio>{K_RATIO_THRESHOLD} on preliminary flow (k_max={hi}, {above} above)"),
    })
}

/// How the attribute dimensionality is chosen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KChoice {
    Fixed(usize),
    Estimate { min: usize, max: usize },
}

/// Resolves `k` and trains the final flow, recording the rule in the model.
pub fn fit_flow(vectors: &[Vec<f64>], labels: &[Attribute], choice: &KChoice, config: &FlowTrainConfig) -> Result<FlowModel> {
    let (k, rule) = match choice {
        KChoice::Fixed(k) => (*k, format!("fixed k={k}")),
        KChoice::Estimate { min, max } => {
            let est = estimate_k(vectors, labels, *min..=*max, config)?;
            (est.k, est.rule)
        }
    };
    let mut model = train_flow(vectors, labels, k, config)?;
    model.meta.k_rule = rule;
    Ok(model)
}

/// Labelled instance embeddings of the discovered attribute words; words claimed by both groups are left out.
pub fn attribute_training_set(
    corpus: &TokenizedCorpus,
    words_a: &BTreeSet<String>,
    words_b: &BTreeSet<String>,
    backend: &dyn EmbeddingBackend,
    instance_cap: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Attribute>)> {
    let mut jobs: Vec<(&String, Attribute)> = Vec::new();
    jobs.extend(words_a.difference(words_b).map(|w| (w, Attribute::A)));
    jobs.extend(words_b.difference(words_a).map(|w| (w, Attribute::B)));
    let parts = jobs
        .par_iter()
        .map(|(word, side)| {
            let mut occs = corpus.find_occurrences(word, DEFAULT_CONTEXT_WINDOW);
            occs.truncate(instance_cap.max(1));
            Ok((embed_all(backend, &occs)?, *side))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    for (embs, side) in parts {
        labels.extend(std::iter::repeat_n(side, embs.len()));
        vectors.extend(embs.into_iter().map(|e| e.vector));
    }
    Ok((vectors, labels))
}

/// Static per-word vectors for decoding counterfactual embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabularyTable {
    pub words: Vec<String>,
    pub vectors: Matrix,
}

impl VocabularyTable {
    pub fn new(entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyTable);
        }
        let dim = entries[0].1.len();
        if let Some((_, v)) = entries.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: v.len() });
        }
        let (words, rows): (Vec<String>, Vec<Vec<f64>>) = entries.into_iter().unzip();
        Ok(Self { words, vectors: rows_to_matrix(&rows) })
    }

    /// Mean contextual embedding of every single-subtoken word that contains a letter.
    pub fn from_corpus(corpus: &TokenizedCorpus, backend: &dyn EmbeddingBackend, instance_cap: usize) -> Result<Self> {
        let index = corpus.index_single_subtoken_words(DEFAULT_CONTEXT_WINDOW, instance_cap.max(1));
        let entries: Vec<_> = index.into_iter().filter(|(w, _)| is_word_like(w)).collect();
        let rows = entries
            .par_iter()
            .map(|(word, occs)| {
                let embs = embed_all(backend, occs)?;
                let mut mean = vec![0.0; backend.dim()];
                for e in &embs {
                    mean.iter_mut().zip(&e.vector).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= embs.len() as f64);
                Ok((word.clone(), mean))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows)
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Word with the highest cosine similarity; ties go to the lexicographically smaller word.
    pub fn decode(&self, z: &[f64]) -> Result<&str> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: z.len() });
        }
        let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut best: Option<(f64, &str)> = None;
        for (word, row) in self.words.iter().zip(self.vectors.rows()) {
            let rn = row.dot(&row).sqrt();
            let dot: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
            let cos = if rn > 0.0 && zn > 0.0 { dot / (rn * zn) } else { 0.0 };
            let better = match best {
                None => true,
                Some((s, w)) => cos > s || (cos == s && word.as_str() < w),
            };
            if better {
                best = Some((cos, word));
            }
        }
        Ok(best.expect("table is non-empty").1)
    }
}

pub fn decode_word<'t>(z: &[f64], table: &'t VocabularyTable) -> Result<&'t str> {
    table.decode(z)
}

/// A word and the majority counterfactual decoded across its instances.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCandidate {
    pub word: String,
    pub counterfactual: String,
    pub votes: usize,
    pub total: usize,
    /// Group the source word was discovered in.
    pub side: Attribute,
}

/// Modal decoded word with its vote count; ties break lexicographically.
pub fn majority_vote(decoded: &[String]) -> Option<(String, usize)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for d in decoded {
        *counts.entry(d).or_default() += 1;
    }
    // BTreeMap iterates in lexicographic order, so the first maximum wins ties
    counts
        .into_iter()
        .fold(None, |best: Option<(&str, usize)>, (w, c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((w, c)),
        })
        .map(|(w, c)| (w.to_string(), c))
}

/// Pair for `word` from its decoded instances, or `None` when the mode is the word itself.
pub fn pair_from_decodings(word: &str, side: Attribute, decoded: &[String]) -> Option<PairCandidate> {
    let (mode, votes) = majority_vote(decoded)?;
    if mode == word {
        return None;
    }
    Some(PairCandidate { word: word.to_string(), counterfactual: mode, votes, total: decoded.len(), side })
}

/// Decodes the counterfactual of every instance of every discovered word and majority-votes per word.
pub fn generate_word_pairs(
    corpus: &TokenizedCorpus,
    words_a: &BTreeSet<String>,
    words_b: &BTreeSet<String>,
    backend: &dyn EmbeddingBackend,
    flow: &FlowModel,
    table: &VocabularyTable,
    instance_cap: usize,
) -> Result<Vec<PairCandidate>> {
    let jobs: Vec<(Attribute, &String)> = words_a
        .iter()
        .map(|w| (Attribute::A, w))
        .chain(words_b.iter().map(|w| (Attribute::B, w)))
        .collect();
    let decoded = jobs
        .par_iter()
        .map(|(side, word)| {
            let mut occs = corpus.find_occurrences(word, DEFAULT_CONTEXT_WINDOW);
            occs.truncate(instance_cap.max(1));
            if occs.is_empty() {
                return Ok(None);
            }
            let embs = embed_all(backend, &occs)?;
            let rows: Vec<Vec<f64>> = embs.into_iter().map(|e| e.vector).collect();
            let swapped = flow.counterfactual_batch(&rows_to_matrix(&rows), side.other())?;
            let words = swapped
                .rows()
                .into_iter()
                .map(|r| table.decode(r.as_slice().expect("standard layout")).map(str::to_string))
                .collect::<Result<Vec<_>>>()?;
            Ok(pair_from_decodings(word, *side, &words))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(decoded.into_iter().flatten().collect())
}

/// TSV rows `word, counterfactual, votes, total`.
pub fn write_pair_report(w: &mut impl Write, pairs: &[PairCandidate]) -> Result<()> {
    writeln!(w, "word\tcounterfactual\tvotes\ttotal")?;
    for p in pairs {
        writeln!(w, "{}\t{}\t{}\t{}", p.word, p.counterfactual, p.votes, p.total)?;
    }
    Ok(())
}

/// Words whose discovered counterpart is claimed by both groups.
pub fn polysemous_candidates(pairs: &[PairCandidate], words_a: &BTreeSet<String>, words_b: &BTreeSet<String>) -> Vec<String> {
    let mut seen: HashMap<&str, ()> = HashMap::new();
    pairs
        .iter()
        .filter(|p| words_a.contains(&p.word) && words_b.contains(&p.word))
        .filter(|p| seen.insert(p.word.as_str(), ()).is_none())
        .map(|p| p.word.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_flow(dim: usize, depth: usize, k: usize, seed: u64, scale: f64) -> FlowModel {
        let arch = FlowArchitecture { dim, depth, hidden: Some(2 * dim), scale_clamp: 2.0, seed };
        let mut flow = FlowModel::new(arch, k).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let ids: Vec<_> = flow.params().ids().collect();
        for id in ids {
            flow.params_mut().get_mut(id).mapv_inplace(|v| v + scale * rng.random_range(-1.0..1.0));
        }
        flow
    }

    fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn identity_at_initialisation() {
        let flow = FlowModel::new(FlowArchitecture { dim: 6, ..Default::default() }, 2).unwrap();
        let z = vec![0.3, -1.2, 4.0, 0.0, 2.5, -0.7];
        let (out, logdet) = flow.forward(&z).unwrap();
        assert_eq!(out, z);
        assert_eq!(logdet, 0.0);
        assert_eq!(flow.inverse(&z).unwrap(), z);
    }

    #[test]
    fn identity_log_likelihood_is_standard_gaussian() {
        let flow = FlowModel::new(FlowArchitecture { dim: 4, ..Default::default() }, 1).unwrap();
        let ll0 = flow.log_likelihood(&[0.0; 4]).unwrap();
        assert!((ll0 + 2.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert!((ll0 + 3.6758).abs() < 1e-4);
        let z = [1.0, -2.0, 0.5, 3.0];
        let sq: f64 = z.iter().map(|v| v * v).sum();
        let expected = -(sq + 4.0 * (2.0 * std::f64::consts::PI).ln()) / 2.0;
        assert!((flow.log_likelihood(&z).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn invalid_k_is_rejected() {
        let arch = FlowArchitecture { dim: 4, ..Default::default() };
        assert!(FlowModel::new(arch.clone(), 0).is_err());
        assert!(FlowModel::new(arch, 4).is_err());
    }

    #[test]
    fn round_trip_on_random_flow() {
        let flow = random_flow(8, 4, 2, 3, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let z = gaussian(&mut rng, 8);
            let back = flow.inverse(&flow.forward(&z).unwrap().0).unwrap();
            let err = z.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "{err}");
            let zt = gaussian(&mut rng, 8);
            let again = flow.forward(&flow.inverse(&zt).unwrap()).unwrap().0;
            let err = zt.iter().zip(&again).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "{err}");
        }
    }

    #[test]
    fn log_det_adds_across_blocks() {
        // a depth-2 flow is the composition of its two blocks; compare with two depth-1 flows
        // sharing those blocks
        let two = random_flow(4, 2, 1, 11, 0.4);
        let mut first = FlowModel::new(FlowArchitecture { depth: 1, ..two.arch.clone() }, 1).unwrap();
        let mut second = first.clone();
        let src = &two.blocks[1];
        second.blocks[0].conditioning = src.conditioning.clone();
        second.blocks[0].transformed = src.transformed.clone();
        second.blocks[0].restore = src.restore.clone();
        let per_block = first.params.len();
        for (i, id) in two.params().ids().enumerate() {
            let target = if i < per_block { &mut first } else { &mut second };
            let local = crate::autodiff::ParamId(i % per_block);
            *target.params_mut().get_mut(local) = two.params().get(id).clone();
        }
        let z = [0.4, -1.0, 2.0, 0.1];
        let (mid, ld1) = first.forward(&z).unwrap();
        let (out, ld2) = second.forward(&mid).unwrap();
        let (direct, ld) = two.forward(&z).unwrap();
        assert!(out.iter().zip(&direct).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!((ld - (ld1 + ld2)).abs() < 1e-12);
    }

    #[test]
    fn correlation_penalty_zero_when_exactly_correlated() {
        let u1 = [0.5, -2.0];
        let u2 = [0.45, -1.8];
        assert!(correlation_penalty(&u2, &u1, 0.9).abs() < 1e-15);
        assert!(correlation_penalty(&u1, &u1, 0.9) > 0.0);
    }

    #[test]
    fn swap_is_idempotent() {
        let z = [1.0, 2.0, 3.0, 4.0];
        let proto = [9.0, 8.0];
        let once = swap_attribute(&z, &proto);
        assert_eq!(swap_attribute(&once, &proto), once);
        assert_eq!(&once[2..], &z[2..]);
    }

    #[test]
    fn counterfactual_requires_prototypes() {
        let flow = FlowModel::new(FlowArchitecture { dim: 4, ..Default::default() }, 1).unwrap();
        assert!(matches!(flow.counterfactual_embedding(&[0.0; 4], Attribute::A), Err(Error::NotFitted(_))));
    }

    #[test]
    fn counterfactual_keeps_residual_dimensions() {
        let mut flow = random_flow(6, 2, 2, 21, 0.3);
        flow.prototypes = Some(Prototypes { a: vec![1.5, -0.5], b: vec![-1.5, 0.5] });
        let z = [0.2, 0.1, -0.3, 1.0, 0.7, -1.1];
        let cf = flow.counterfactual_embedding(&z, Attribute::B).unwrap();
        let (before, _) = flow.forward(&z).unwrap();
        let (after, _) = flow.forward(&cf).unwrap();
        for i in 2..6 {
            assert!((before[i] - after[i]).abs() < 1e-9);
        }
        assert!((after[0] + 1.5).abs() < 1e-9 && (after[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn single_group_training_is_rejected() {
        let v = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let err = train_flow(&v, &[Attribute::A, Attribute::A], 1, &FlowTrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
        let bad_sigma = FlowTrainConfig { sigma: 1.0, ..Default::default() };
        assert!(train_flow(&v, &[Attribute::A, Attribute::B], 1, &bad_sigma).is_err());
    }

    #[test]
    fn degenerate_data_rejected_by_k_estimation() {
        let v = vec![vec![1.0, 1.0, 1.0]; 6];
        let labels = [Attribute::A, Attribute::B, Attribute::A, Attribute::B, Attribute::A, Attribute::B];
        let err = estimate_k(&v, &labels, 1..=2, &FlowTrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateData(_)));
    }

    #[test]
    fn fixed_k_bypasses_estimation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<Vec<f64>> = (0..20).map(|_| gaussian(&mut rng, 10)).collect();
        let labels: Vec<Attribute> = (0..20).map(|i| Attribute::from_index(i % 2)).collect();
        let cfg = FlowTrainConfig { epochs: 1, depth: 2, ..Default::default() };
        let flow = fit_flow(&v, &labels, &KChoice::Fixed(8), &cfg).unwrap();
        assert_eq!(flow.k, 8);
        assert_eq!(flow.meta.k_rule, "fixed k=8");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut flow = random_flow(6, 2, 2, 4, 0.2);
        flow.prototypes = Some(Prototypes { a: vec![1.0, 2.0], b: vec![-1.0, -2.0] });
        flow.meta.loss_history = vec![3.0, 2.0];
        let mut buf = Vec::new();
        flow.write_to(&mut buf).unwrap();
        let loaded = FlowModel::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded.params(), flow.params());
        assert_eq!(loaded.prototypes, flow.prototypes);
        assert_eq!(loaded.meta.loss_history, flow.meta.loss_history);
        assert_eq!(loaded.forward(&[0.1; 6]).unwrap(), flow.forward(&[0.1; 6]).unwrap());
    }

    #[test]
    fn decode_exact_entry_and_ties() {
        let table = VocabularyTable::new(vec![
            ("zeta".into(), vec![1.0, 0.0]),
            ("alpha".into(), vec![1.0, 0.0]),
            ("beta".into(), vec![0.0, 1.0]),
        ])
        .unwrap();
        assert_eq!(table.decode(&[0.0, 2.0]).unwrap(), "beta");
        assert_eq!(table.decode(&[3.0, 0.0]).unwrap(), "alpha");
        assert!(VocabularyTable::new(vec![]).is_err());
    }

    #[test]
    fn majority_vote_and_self_pairs() {
        let decoded: Vec<String> = ["he", "he", "him", "he"].iter().map(|s| s.to_string()).collect();
        let pair = pair_from_decodings("she", Attribute::A, &decoded).unwrap();
        assert_eq!((pair.counterfactual.as_str(), pair.votes, pair.total), ("he", 3, 4));
        let own: Vec<String> = vec!["table".into(); 5];
        assert!(pair_from_decodings("table", Attribute::A, &own).is_none());
        let tie: Vec<String> = ["b", "a"].iter().map(|s| s.to_string()).collect();
        assert_eq!(majority_vote(&tie).unwrap().0, "a");
    }
}
