//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass in execution order.
//! Node ids increase monotonically, so creation order is a topological order
//! and [`Tape::backward`] walks it once in reverse.

use crate::diff::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Rows whose Euclidean norm falls below this are rejected by normalization.
pub const NORM_EPSILON: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    MeanRowsByGroup {
        input: Var,
        groups: Vec<usize>,
        counts: Vec<usize>,
    },
    SoftmaxRows(Var),
    L2NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
    Tanh(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that needed them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros when nothing flowed into it.
    pub fn of(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

fn check_finite(m: &Matrix, context: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(context.to_string()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable input.
    pub fn param(&mut self, value: Matrix) -> Result<Var> {
        check_finite(&value, "parameter")?;
        Ok(self.push(value, Op::Leaf, true))
    }

    pub(crate) fn param_unchecked(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        check_finite(&value, "constant")?;
        Ok(self.push(value, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        let ng = self.needs(a);
        Ok(self.push(value, Op::Transpose(a), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// Adds a `1 x cols` row vector to every row of `a`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if self.shape(bias) != (1, cols) {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias {:?} for input {:?}", self.shape(bias), (rows, cols)),
            ));
        }
        let mut value = self.value(a).clone();
        let b = self.value(bias).row(0).to_vec();
        for r in 0..rows {
            for (x, y) in value.row_mut(r).iter_mut().zip(&b) {
                *x += y;
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(value, Op::AddRowBias(a, bias), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        if !s.is_finite() {
            return Err(Error::NonFinite("scale factor".into()));
        }
        let value = self.value(a).scale(s);
        let ng = self.needs(a);
        Ok(self.push(value, Op::Scale(a, s), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let cols = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{} columns vs {cols}", m.cols()),
                ));
            }
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Gathers rows by index; indices may repeat.
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(a).select_rows(indices)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::SelectRows(a, indices.to_vec()), ng))
    }

    /// Row `g` of the output is the mean of the input rows `i` with `groups[i] == g`.
    pub fn mean_rows_by_group(&mut self, a: Var, groups: &[usize], n_groups: usize) -> Result<Var> {
        let input = self.value(a);
        if groups.len() != input.rows() {
            return Err(Error::shape(
                "mean_rows_by_group",
                format!("{} group ids for {} rows", groups.len(), input.rows()),
            ));
        }
        let mut counts = vec![0usize; n_groups];
        for &g in groups {
            if g >= n_groups {
                return Err(Error::IndexOutOfRange {
                    kind: "group",
                    index: g,
                    len: n_groups,
                });
            }
            counts[g] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyGroup(empty));
        }
        let mut value = Matrix::zeros(n_groups, input.cols());
        for (i, &g) in groups.iter().enumerate() {
            for (o, x) in value.row_mut(g).iter_mut().zip(input.row(i)) {
                *o += x;
            }
        }
        for (g, &c) in counts.iter().enumerate() {
            let inv = 1.0 / c as f64;
            for o in value.row_mut(g) {
                *o *= inv;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(
            value,
            Op::MeanRowsByGroup {
                input: a,
                groups: groups.to_vec(),
                counts,
            },
            ng,
        ))
    }

    /// Mean of all rows as a single row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let rows = self.shape(a).0;
        self.mean_rows_by_group(a, &vec![0; rows], 1)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let input = self.value(a);
        let mut value = input.clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let ng = self.needs(a);
        Ok(self.push(value, Op::SoftmaxRows(a), ng))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let input = self.value(a);
        let norms = input.row_norms();
        if let Some(row) = norms.iter().position(|&n| n.is_nan() || n <= NORM_EPSILON) {
            return Err(Error::ZeroNorm { row });
        }
        let mut value = input.clone();
        for (r, &n) in norms.iter().enumerate() {
            for x in value.row_mut(r) {
                *x /= n;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(value, Op::L2NormalizeRows { input: a, norms }, ng))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        Ok(self.push(value, Op::Tanh(a), ng))
    }

    /// Batch-mean softmax cross-entropy; returns a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if labels.len() != l.rows() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {} rows", labels.len(), l.rows()),
            ));
        }
        if l.rows() == 0 {
            return Err(Error::shape("cross_entropy", "empty batch"));
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= l.cols() {
                return Err(Error::IndexOutOfRange {
                    kind: "label",
                    index: y,
                    len: l.cols(),
                });
            }
            let row = l.row(r);
            total += log_sum_exp(row) - row[y];
        }
        let value = Matrix::filled(1, 1, total / l.rows() as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let ng = self.needs(a);
        Ok(self.push(value, Op::Sum(a), ng))
    }

    /// Propagates `d output / d node` for every node, seeding the output with ones.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let (r, c) = self.shape(output);
        grads[output.0] = Some(Matrix::filled(r, c, 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Matrix,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let ga = g.matmul_t(self.value(*b))?;
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = self.value(*a).t_matmul(g)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRowBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*bias) {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for row in g.row_iter() {
                        for (o, x) in gb.row_mut(0).iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    if self.needs(p) {
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        self.accumulate(grads, p, Matrix::from_vec(rows, cols, slice)?);
                    }
                    offset += rows;
                }
            }
            Op::SelectRows(a, indices) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Matrix::zeros(rows, cols);
                for (k, &i) in indices.iter().enumerate() {
                    for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::MeanRowsByGroup {
                input,
                groups,
                counts,
            } => {
                let (rows, cols) = self.shape(*input);
                let mut ga = Matrix::zeros(rows, cols);
                for (i, &grp) in groups.iter().enumerate() {
                    let inv = 1.0 / counts[grp] as f64;
                    for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(grp)) {
                        *o = x * inv;
                    }
                }
                self.accumulate(grads, *input, ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let inner = dot(y, gr);
                    for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = yv * (gv - inner);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::L2NormalizeRows { input, norms } => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for (r, &n) in norms.iter().enumerate() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let inner = dot(y, gr);
                    for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = (gv - yv * inner) / n;
                    }
                }
                self.accumulate(grads, *input, ga);
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(out, |gv, y| gv * (1.0 - y * y))?;
                self.accumulate(grads, *a, ga);
            }
            Op::CrossEntropy { logits, labels } => {
                let l = self.value(*logits);
                let scale = g.get(0, 0) / l.rows() as f64;
                let mut gl = l.clone();
                for (r, &y) in labels.iter().enumerate() {
                    let row = gl.row_mut(r);
                    softmax_in_place(row);
                    row[y] -= 1.0;
                    for x in row.iter_mut() {
                        *x *= scale;
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Matrix::filled(r, c, g.get(0, 0)));
            }
        }
        Ok(())
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[0.0, 0.0]])).unwrap();
        let y = t.softmax_rows(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn normalize_three_four_five() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[3.0, 4.0]])).unwrap();
        let y = t.l2_normalize_rows(x).unwrap();
        let v = t.value(y);
        assert!((v.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((v.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_row_normalization_fails() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[1.0, 0.0], &[0.0, 0.0]])).unwrap();
        assert!(matches!(
            t.l2_normalize_rows(x),
            Err(Error::ZeroNorm { row: 1 })
        ));
    }

    #[test]
    fn group_mean_arithmetic() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[2.0], &[4.0], &[10.0]])).unwrap();
        let y = t.mean_rows_by_group(x, &[0, 0, 1], 2).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 10.0]);
    }

    #[test]
    fn group_mean_rejects_empty_group() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[2.0], &[4.0]])).unwrap();
        assert!(matches!(
            t.mean_rows_by_group(x, &[0, 2], 3),
            Err(Error::EmptyGroup(1))
        ));
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let mut t = Tape::new();
        assert!(matches!(
            t.param(m(&[&[f64::NAN]])),
            Err(Error::NonFinite(_))
        ));
        assert!(t.constant(m(&[&[f64::INFINITY]])).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 3)).unwrap();
        let b = t.constant(Matrix::zeros(2, 2)).unwrap();
        assert!(matches!(t.matmul(a, a), Err(Error::Shape { .. })));
        assert!(t.add(a, b).is_err());
        assert!(t.add_row_bias(a, b).is_err());
        assert!(t.concat_rows(&[a, b]).is_err());
    }

    #[test]
    fn unreferenced_rows_get_zero_gradient() {
        let mut t = Tape::new();
        let x = t
            .param(m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]))
            .unwrap();
        let s = t.select_rows(x, &[2, 0, 2]).unwrap();
        let total = t.sum(s).unwrap();
        let g = t.backward(total).unwrap().of(x);
        assert_eq!(g.data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(m(&[&[1.0, 2.0]])).unwrap();
        let b = t.param(m(&[&[3.0, 4.0]])).unwrap();
        let p = t.mul(a, b).unwrap();
        let s = t.sum(p).unwrap();
        let grads = t.backward(s).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.of(b).data(), &[1.0, 2.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_classes() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::filled(3, 5, 0.7)).unwrap();
        let l = t.cross_entropy(x, &[0, 3, 4]).unwrap();
        assert!((t.value(l).get(0, 0) - 5f64.ln()).abs() < 1e-12);
        assert!(t.cross_entropy(x, &[0, 5, 1]).is_err());
    }
}
