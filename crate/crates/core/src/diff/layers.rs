//! Parameter containers and the composite ops built from tape primitives.
//!
//! Containers are generic over the leaf type so the same structure carries
//! concrete matrices, tape handles, gradients and optimizer moments.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::matrix::Matrix;
use crate::diff::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Walks every leaf of a parameter tree with a stable dotted name.
pub trait ParamTree<T> {
    type Mapped<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::Mapped<U>;

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T));

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        self.map_named(prefix, &mut |name, v| f(name, v));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine map `x W + b` applied to row vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<T = Matrix> {
    pub weight: T,
    pub bias: T,
}

impl Dense {
    pub fn random<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: Matrix::random_normal(inputs, outputs, 1.0 / (inputs as f64).sqrt(), rng),
            bias: Matrix::zeros(1, outputs),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(inputs, outputs),
            bias: Matrix::zeros(1, outputs),
        }
    }
}

impl<T> ParamTree<T> for Dense<T> {
    type Mapped<U> = Dense<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Dense<U> {
        Dense {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub fn dense_apply(tape: &mut Tape, x: Var, layer: &Dense<Var>) -> Result<Var> {
    let h = tape.matmul(x, layer.weight)?;
    tape.add_row_bias(h, layer.bias)
}

/// Query, key and value projections of one single-head attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights<T = Matrix> {
    pub query: T,
    pub key: T,
    pub value: T,
}

impl AttentionWeights {
    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            query: Matrix::random_normal(dim, dim, std, rng),
            key: Matrix::random_normal(dim, dim, std, rng),
            value: Matrix::random_normal(dim, dim, std, rng),
        }
    }
}

impl<T> ParamTree<T> for AttentionWeights<T> {
    type Mapped<U> = AttentionWeights<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> AttentionWeights<U> {
        AttentionWeights {
            query: f(&join(prefix, "query"), &self.query),
            key: f(&join(prefix, "key"), &self.key),
            value: f(&join(prefix, "value"), &self.value),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "query"), &mut self.query);
        f(&join(prefix, "key"), &mut self.key);
        f(&join(prefix, "value"), &mut self.value);
    }
}

/// Residual two-layer perceptron `x + tanh(x W1 + b1) W2 + b2`.
///
/// With a zero output layer it is exactly the identity map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T = Matrix> {
    pub hidden: Dense<T>,
    pub output: Dense<T>,
}

impl Mlp {
    pub fn identity_init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            hidden: Dense::random(dim, dim, rng),
            output: Dense::zeros(dim, dim),
        }
    }
}

impl<T> ParamTree<T> for Mlp<T> {
    type Mapped<U> = Mlp<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Mlp<U> {
        Mlp {
            hidden: self.hidden.map_named(&join(prefix, "hidden"), f),
            output: self.output.map_named(&join(prefix, "output"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

pub fn mlp_apply(tape: &mut Tape, x: Var, mlp: &Mlp<Var>) -> Result<Var> {
    let h = dense_apply(tape, x, &mlp.hidden)?;
    let h = tape.tanh(h)?;
    let delta = dense_apply(tape, h, &mlp.output)?;
    tape.add(x, delta)
}

/// Registers every matrix of a tree as a trainable tape input.
pub fn bind_params<P>(tape: &mut Tape, params: &P) -> Result<P::Mapped<Var>>
where
    P: ParamTree<Matrix>,
{
    let mut bad = None;
    params.visit("", &mut |name, m| {
        if bad.is_none() && !m.is_finite() {
            bad = Some(name.to_string());
        }
    });
    if let Some(name) = bad {
        return Err(Error::NonFinite(format!("parameter {name}")));
    }
    Ok(params.map_named("", &mut |_, m| tape.param_unchecked(m.clone())))
}

/// Flattened `(name, matrix)` list in tree order.
pub fn named_matrices<P: ParamTree<Matrix>>(params: &P) -> Vec<(String, Matrix)> {
    let mut out = Vec::new();
    params.visit("", &mut |name, m| out.push((name.to_string(), m.clone())));
    out
}

pub fn count_params<P: ParamTree<Matrix>>(params: &P) -> usize {
    let mut total = 0;
    params.visit("", &mut |_, m| total += m.len());
    total
}
