//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records operations on [`Var`] handles. Parameters live in a
//! [`ParamStore`] and are borrowed (not copied) into the graph; calling
//! [`Graph::backward`] yields one gradient per parameter. Graphs are cheap and
//! meant to be built per forward pass and then dropped, which also makes them
//! usable for pure inference.

use std::borrow::Cow;

use ndarray::{s, Array2, Axis, Zip};

pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn from_parts(names: Vec<String>, values: Vec<Matrix>) -> Self {
        debug_assert_eq!(names.len(), values.len());
        Self { names, values }
    }

    pub(crate) fn parts(&self) -> (&[String], &[Matrix]) {
        (&self.names, &self.values)
    }
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn empty(num_params: usize) -> Self {
        Self { grads: vec![None; num_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self`; both must come from the same store.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => *m += t,
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Exp(Var),
    Gelu(Var),
    Square(Var),
    Sum(Var),
    SelectCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
}

struct Node<'p> {
    value: Cow<'p, Matrix>,
    op: Op,
}

/// Recorded computation borrowing parameters from a [`ParamStore`].
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Row-wise softmax of a matrix, numerically stabilised by the row max.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::with_capacity(256) }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.store;
        self.nodes.push(Node { value: Cow::Borrowed(store.get(id)), op: Op::Param(id) });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a single row");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a) * factor;
        self.push(v, Op::Scale(a, factor))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Sum of all entries as a `1 x 1` matrix.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let src = self.value(a);
        let mut v = Matrix::zeros((src.nrows(), cols.len()));
        for (j, &c) in cols.iter().enumerate() {
            v.column_mut(j).assign(&src.column(c));
        }
        self.push(v, Op::SelectCols(a, cols.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut v = Matrix::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let m = self.value(p);
            v.slice_mut(s![.., at..at + m.ncols()]).assign(m);
            at += m.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes row `i` of the output.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let src = self.value(table);
        let mut v = Matrix::zeros((ids.len(), src.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).assign(&src.row(id));
        }
        self.push(v, Op::GatherRows(table, ids.to_vec()))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalisation with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut normalized = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in normalized.rows_mut() {
            let mean = row.sum() / n;
            let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let out = &normalized * self.value(gain) + self.value(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, normalized, inv_std })
    }

    /// Summed negative log-likelihood of `targets[i]` under `softmax(logits[i])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "one target per logit row");
        let probs = softmax_rows(lv);
        let mut total = 0.0;
        for (i, row) in lv.rows().into_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.fold(0.0, |acc, &v| acc + (v - max).exp()).ln();
            total += lse - row[targets[i]];
        }
        self.push(
            Matrix::from_elem((1, 1), total),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
        )
    }

    /// Reverse sweep from a scalar (`1 x 1`) output.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::ones(self.value(output).raw_dim()));
        let mut param_grads = Gradients::empty(self.store.len());

        fn acc(slot: &mut Option<Matrix>, g: Matrix) {
            match slot {
                Some(m) => *m += &g,
                None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => acc(&mut param_grads.grads[id.0], grad),
                Op::MatMul(a, b) => {
                    let ga = grad.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&grad);
                    acc(&mut grads[a.0], ga);
                    acc(&mut grads[b.0], gb);
                }
                Op::Transpose(a) => acc(&mut grads[a.0], grad.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads[b.0], grad.clone());
                    acc(&mut grads[a.0], grad);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads[b.0], -&grad);
                    acc(&mut grads[a.0], grad);
                }
                Op::Mul(a, b) => {
                    let ga = &grad * self.value(*b);
                    let gb = &grad * self.value(*a);
                    acc(&mut grads[a.0], ga);
                    acc(&mut grads[b.0], gb);
                }
                Op::AddRow(a, row) => {
                    let gr = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads[row.0], gr);
                    acc(&mut grads[a.0], grad);
                }
                Op::Scale(a, f) => acc(&mut grads[a.0], grad * *f),
                Op::Tanh(a) => {
                    let mut g = grad;
                    Zip::from(&mut g).and(&*node.value).for_each(|g, &y| *g *= 1.0 - y * y);
                    acc(&mut grads[a.0], g);
                }
                Op::Exp(a) => acc(&mut grads[a.0], grad * &*node.value),
                Op::Gelu(a) => {
                    let mut g = grad;
                    Zip::from(&mut g).and(self.value(*a)).for_each(|g, &x| *g *= gelu_grad(x));
                    acc(&mut grads[a.0], g);
                }
                Op::Square(a) => {
                    let mut g = grad;
                    Zip::from(&mut g).and(self.value(*a)).for_each(|g, &x| *g *= 2.0 * x);
                    acc(&mut grads[a.0], g);
                }
                Op::Sum(a) => {
                    let g = Matrix::from_elem(self.value(*a).raw_dim(), grad[[0, 0]]);
                    acc(&mut grads[a.0], g);
                }
                Op::SelectCols(a, cols) => {
                    let mut g = Matrix::zeros(self.value(*a).raw_dim());
                    for (j, &c) in cols.iter().enumerate() {
                        let mut col = g.column_mut(c);
                        col += &grad.column(j);
                    }
                    acc(&mut grads[a.0], g);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut grads[p.0], grad.slice(s![.., at..at + w]).to_owned());
                        at += w;
                    }
                }
                Op::GatherRows(table, ids) => {
                    let mut g = Matrix::zeros(self.value(*table).raw_dim());
                    for (i, &id) in ids.iter().enumerate() {
                        let mut row = g.row_mut(id);
                        row += &grad.row(i);
                    }
                    acc(&mut grads[table.0], g);
                }
                Op::SoftmaxRows(a) => {
                    let y = &*node.value;
                    let mut g = &grad * y;
                    for (mut row, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row).and(&yrow).for_each(|r, &yv| *r -= yv * dot);
                    }
                    acc(&mut grads[a.0], g);
                }
                Op::LayerNorm { x, gain, bias, normalized, inv_std } => {
                    let gain_v = self.value(*gain);
                    let gb = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gg = (&grad * normalized).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &grad * gain_v;
                    let n = normalized.ncols() as f64;
                    let mut gx = Matrix::zeros(normalized.raw_dim());
                    for r in 0..normalized.nrows() {
                        let dh = dxhat.row(r);
                        let xh = normalized.row(r);
                        let mean_dh = dh.sum() / n;
                        let mean_dh_xh = dh.dot(&xh) / n;
                        let inv = inv_std[r];
                        for c in 0..normalized.ncols() {
                            gx[[r, c]] = inv * (dh[c] - mean_dh - xh[c] * mean_dh_xh);
                        }
                    }
                    acc(&mut grads[bias.0], gb);
                    acc(&mut grads[gain.0], gg);
                    acc(&mut grads[x.0], gx);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let scale = grad[[0, 0]];
                    let mut g = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        g[[i, t]] -= 1.0;
                    }
                    g.mapv_inplace(|v| v * scale);
                    acc(&mut grads[logits.0], g);
                }
            }
        }
        param_grads
    }
}

/// Adam optimiser state over a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Matrix> = store.values.iter().map(|m| Matrix::zeros(m.raw_dim())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let b1c = 1.0 - self.beta1.powi(self.step as i32);
        let b2c = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (i, g) in grads.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            Zip::from(&mut store.values[i])
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / b1c) / ((*v / b2c).sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of `f` w.r.t. every entry of every parameter.
    fn check_grads(store: &mut ParamStore, f: impl Fn(&mut Graph) -> Var) {
        let grads = {
            let mut g = Graph::new(store);
            let out = f(&mut g);
            g.backward(out)
        };
        let h = 1e-6;
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).raw_dim();
            for idx in ndarray::indices(shape) {
                let orig = store.get(id)[idx];
                store.get_mut(id)[idx] = orig + h;
                let plus = {
                    let mut g = Graph::new(store);
                    let out = f(&mut g);
                    g.scalar(out)
                };
                store.get_mut(id)[idx] = orig - h;
                let minus = {
                    let mut g = Graph::new(store);
                    let out = f(&mut g);
                    g.scalar(out)
                };
                store.get_mut(id)[idx] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let analytic = grads.get(id).map(|g| g[idx]).unwrap_or(0.0);
                let denom = numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    (numeric - analytic).abs() / denom < 1e-5,
                    "{} {:?}: numeric {numeric} analytic {analytic}",
                    store.name(id),
                    idx
                );
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let x = store.add("x", random_matrix(&mut rng, 3, 4));
        let w = store.add("w", random_matrix(&mut rng, 4, 5));
        let b = store.add("b", random_matrix(&mut rng, 1, 5));
        check_grads(&mut store, |g| {
            let xv = g.param(x);
            let wv = g.param(w);
            let bv = g.param(b);
            let h = g.matmul(xv, wv);
            let h = g.add_row(h, bv);
            let a = g.gelu(h);
            let t = g.tanh(a);
            let e = g.exp(t);
            let m = g.mul(e, a);
            let sq = g.square(m);
            let d = g.sub(sq, h);
            let sc = g.scale(d, 0.3);
            g.sum(sc)
        });
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let table = store.add("table", random_matrix(&mut rng, 6, 4));
        let gain = store.add("gain", random_matrix(&mut rng, 1, 4));
        let bias = store.add("bias", random_matrix(&mut rng, 1, 4));
        let proj = store.add("proj", random_matrix(&mut rng, 4, 3));
        check_grads(&mut store, |g| {
            let t = g.param(table);
            let rows = g.gather_rows(t, &[0, 3, 3, 5]);
            let gn = g.param(gain);
            let bs = g.param(bias);
            let ln = g.layer_norm(rows, gn, bs, 1e-5);
            let left = g.select_cols(ln, &[2, 0]);
            let right = g.select_cols(ln, &[1, 3]);
            let cat = g.concat_cols(&[right, left]);
            let tr = g.transpose(cat);
            let att = g.matmul(cat, tr);
            let sm = g.softmax_rows(att);
            let mixed = g.matmul(sm, cat);
            let p = g.param(proj);
            let logits = g.matmul(mixed, p);
            g.cross_entropy(logits, &[0, 2, 1, 1])
        });
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let logits = g.input(Matrix::zeros((4, 50)));
        let loss = g.cross_entropy(logits, &[1, 2, 3, 4]);
        assert!((g.scalar(loss) - 4.0 * 50f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_normalise() {
        let m = array![[1.0, 2.0, 3.0], [1000.0, 1000.0, -1000.0]];
        let s = softmax_rows(&m);
        for row in s.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((s[[1, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adam_decreases_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("p", array![[3.0, -2.0]]);
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..300 {
            let grads = {
                let mut g = Graph::new(&store);
                let v = g.param(p);
                let sq = g.square(v);
                let l = g.sum(sq);
                g.backward(l)
            };
            opt.step(&mut store, &grads);
        }
        assert!(store.get(p).iter().all(|v| v.abs() < 1e-2));
    }
}
