//! Brute-force reference implementations shared by the integration tests.
//! Everything here uses plain loops over `Vec<Vec<f64>>` and never calls the
//! library's own numeric kernels.

#![allow(dead_code)]

use dfsp_core::diff::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rows_of(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn to_matrix(rows: &Rows) -> Matrix {
    Matrix::from_rows(rows).unwrap()
}

pub fn random_rows(r: &mut impl Rng, rows: usize, cols: usize) -> Rows {
    (0..rows)
        .map(|_| (0..cols).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn matmul(a: &Rows, b: &Rows) -> Rows {
    let inner = b.len();
    let cols = if inner == 0 { 0 } else { b[0].len() };
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn transpose(a: &Rows) -> Rows {
    if a.is_empty() {
        return vec![];
    }
    (0..a[0].len())
        .map(|j| a.iter().map(|r| r[j]).collect())
        .collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn normalize(row: &[f64]) -> Vec<f64> {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    row.iter().map(|v| v / n).collect()
}

pub fn mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    out.iter().map(|v| v / rows.len() as f64).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Attention weights and output of `softmax((S2 Wq)(S1 Wk)^T / sqrt(d)) (S1 Wv)`.
pub fn attention(s1: &Rows, s2: &Rows, wq: &Rows, wk: &Rows, wv: &Rows) -> (Rows, Rows) {
    let q = matmul(s2, wq);
    let k = matmul(s1, wk);
    let v = matmul(s1, wv);
    let scale = 1.0 / (wq[0].len() as f64).sqrt();
    let mut weights = Vec::new();
    let mut out = Vec::new();
    for qi in &q {
        let logits: Vec<f64> = k.iter().map(|kj| dot(qi, kj) * scale).collect();
        let a = softmax(&logits);
        let mut o = vec![0.0; v[0].len()];
        for (aj, vj) in a.iter().zip(&v) {
            for (oc, vc) in o.iter_mut().zip(vj) {
                *oc += aj * vc;
            }
        }
        weights.push(a);
        out.push(o);
    }
    (weights, out)
}

pub fn dense(x: &Rows, w: &Rows, b: &[f64]) -> Rows {
    matmul(x, w)
        .into_iter()
        .map(|r| r.iter().zip(b).map(|(v, bb)| v + bb).collect())
        .collect()
}

/// Residual perceptron `x + tanh(x W1 + b1) W2 + b2`.
pub fn mlp(x: &Rows, w1: &Rows, b1: &[f64], w2: &Rows, b2: &[f64]) -> Rows {
    let h: Rows = dense(x, w1, b1)
        .into_iter()
        .map(|r| r.into_iter().map(f64::tanh).collect())
        .collect();
    let d = dense(&h, w2, b2);
    x.iter()
        .zip(d)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
        .collect()
}

/// Per-group means by explicit accumulation.
pub fn group_means(x: &Rows, groups: &[usize], n_groups: usize) -> Rows {
    let mut sums = vec![vec![0.0; x[0].len()]; n_groups];
    let mut counts = vec![0usize; n_groups];
    for (row, &g) in x.iter().zip(groups) {
        counts[g] += 1;
        for (s, v) in sums[g].iter_mut().zip(row) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| s.into_iter().map(|v| v / c as f64).collect())
        .collect()
}

pub fn cross_entropy(logits: &Rows, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let p = softmax(row);
        total -= p[y].ln();
    }
    total / labels.len() as f64
}

pub fn max_abs_diff(a: &Rows, b: &Rows) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "col count");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// Random seen-pair set covering every state and object.
pub fn covering_pairs(r: &mut impl Rng, n: usize, m: usize, extra: usize) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = (0..n.max(m)).map(|k| (k % n, k % m)).collect();
    let mut tries = 0;
    while pairs.len() < (n.max(m) + extra).min(n * m) && tries < 1000 {
        let p = (r.random_range(0..n), r.random_range(0..m));
        if !pairs.contains(&p) {
            pairs.push(p);
        }
        tries += 1;
    }
    pairs
}

pub fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}
