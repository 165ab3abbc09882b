//! Shared layer building blocks on top of [`crate::autodiff`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Matrix, ParamId, ParamStore, Var};

/// Affine map `x W + b` with `W: in x out` and `b: 1 x out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

pub enum Init {
    /// Normal with variance `2 / (in + out)`.
    Xavier,
    Normal(f64),
    Zeros,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let std = match init {
            Init::Xavier => (2.0 / (input_dim + output_dim) as f64).sqrt(),
            Init::Normal(s) => s,
            Init::Zeros => 0.0,
        };
        let weight = if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("finite std");
            Matrix::from_shape_simple_fn((input_dim, output_dim), || normal.sample(rng))
        } else {
            Matrix::zeros((input_dim, output_dim))
        };
        let weight = store.add(format!("{name}.weight"), weight);
        let bias = store.add(format!("{name}.bias"), Matrix::zeros((1, output_dim)));
        Self { weight, bias, input_dim, output_dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let h = g.matmul(x, w);
        g.add_row(h, b)
    }
}

/// Layer-norm gain/bias pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Matrix::ones((1, dim)));
        let bias = store.add(format!("{name}.bias"), Matrix::zeros((1, dim)));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, 1e-5)
    }
}
