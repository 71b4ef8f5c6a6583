//! Fully learnable soft prompts `[v1]..[vp][state][object]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::layers::join;
use crate::diff::{Matrix, ParamTree, Tape, Var};
use crate::error::{Error, Result};
use crate::space::{CompositionSpace, Pair};

/// Learnable prefix, per-state and per-object embedding rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTable<T = Matrix> {
    /// `p x d`
    pub prefix: T,
    /// `n x d`
    pub state_emb: T,
    /// `m x d`
    pub object_emb: T,
}

impl<T> ParamTree<T> for PromptTable<T> {
    type Mapped<U> = PromptTable<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> PromptTable<U> {
        PromptTable {
            prefix: f(&join(prefix, "prefix"), &self.prefix),
            state_emb: f(&join(prefix, "state_emb"), &self.state_emb),
            object_emb: f(&join(prefix, "object_emb"), &self.object_emb),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "prefix"), &mut self.prefix);
        f(&join(prefix, "state_emb"), &mut self.state_emb);
        f(&join(prefix, "object_emb"), &mut self.object_emb);
    }
}

impl PromptTable {
    /// Entries i.i.d. `N(0, 1/d)`, deterministic in `seed`.
    pub fn init(
        space: &CompositionSpace,
        dim: usize,
        prefix_len: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(
            space.n_states(),
            space.n_objects(),
            dim,
            prefix_len,
            &mut rng,
        )
    }

    pub fn init_with<R: rand::Rng + ?Sized>(
        n_states: usize,
        n_objects: usize,
        dim: usize,
        prefix_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config(
                "prompt embedding dimension must be >= 1".into(),
            ));
        }
        let std = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            prefix: Matrix::random_normal(prefix_len, dim, std, rng),
            state_emb: Matrix::random_normal(n_states, dim, std, rng),
            object_emb: Matrix::random_normal(n_objects, dim, std, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.state_emb.cols()
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix.rows()
    }

    /// Number of embedding vectors in the table.
    pub fn vector_count(&self) -> usize {
        self.prefix.rows() + self.state_emb.rows() + self.object_emb.rows()
    }
}

/// Stacked prompt sequences for a list of pairs.
///
/// `tokens` has `pairs.len() * seq_len` rows; rows `k*seq_len .. (k+1)*seq_len`
/// are the sequence `[θ_0 .. θ_{p-1}, θ_s, θ_o]` of pair `k`.
#[derive(Debug, Clone)]
pub struct PromptBatch {
    pub tokens: Var,
    pub seq_len: usize,
    pub pairs: Vec<Pair>,
}

/// Gathers the soft prompt of every pair from the bound table. Gradients
/// flow back into exactly the referenced table rows.
pub fn build_prompts(
    tape: &mut Tape,
    table: &PromptTable<Var>,
    pairs: &[Pair],
) -> Result<PromptBatch> {
    let p = tape.shape(table.prefix).0;
    let n = tape.shape(table.state_emb).0;
    let m = tape.shape(table.object_emb).0;
    let stacked = tape.concat_rows(&[table.prefix, table.state_emb, table.object_emb])?;

    let seq_len = p + 2;
    let mut index = Vec::with_capacity(pairs.len() * seq_len);
    for &(s, o) in pairs {
        if s >= n {
            return Err(Error::IndexOutOfRange {
                kind: "state",
                index: s,
                len: n,
            });
        }
        if o >= m {
            return Err(Error::IndexOutOfRange {
                kind: "object",
                index: o,
                len: m,
            });
        }
        index.extend(0..p);
        index.push(p + s);
        index.push(p + n + o);
    }
    let tokens = tape.select_rows(stacked, &index)?;
    Ok(PromptBatch {
        tokens,
        seq_len,
        pairs: pairs.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::bind_params;
    use crate::space::World;

    fn space(n: usize, m: usize) -> CompositionSpace {
        let seen: Vec<Pair> = (0..n.max(m)).map(|k| (k % n, k % m)).collect();
        CompositionSpace::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            (0..m).map(|i| format!("o{i}")).collect(),
            seen,
            vec![],
            World::Closed,
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_counts_vectors() {
        let sp = space(3, 4);
        let a = PromptTable::init(&sp, 16, 3, 7).unwrap();
        let b = PromptTable::init(&sp, 16, 3, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.vector_count(), 10);
        assert_ne!(a, PromptTable::init(&sp, 16, 3, 8).unwrap());
    }

    #[test]
    fn init_variance_is_one_over_dim() {
        // 625 vectors x 16 = 10k entries
        let sp = space(300, 322);
        let t = PromptTable::init(&sp, 16, 3, 11).unwrap();
        let all: Vec<f64> = [&t.prefix, &t.state_emb, &t.object_emb]
            .iter()
            .flat_map(|m| m.data().iter().copied())
            .collect();
        assert!(all.len() >= 10_000);
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (all.len() - 1) as f64;
        let target = 1.0 / 16.0;
        assert!((var - target).abs() < 0.2 * target, "variance {var}");
    }

    #[test]
    fn prompt_layout_and_weight_sharing() {
        let sp = space(3, 3);
        let table = PromptTable::init(&sp, 4, 3, 1).unwrap();
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &table).unwrap();
        let batch = build_prompts(&mut tape, &bound, &[(1, 2), (1, 0)]).unwrap();
        assert_eq!(batch.seq_len, 5);
        let v = tape.value(batch.tokens);
        assert_eq!(v.rows(), 10);
        for k in 0..3 {
            assert_eq!(v.row(k), table.prefix.row(k));
            assert_eq!(v.row(5 + k), table.prefix.row(k));
        }
        assert_eq!(v.row(3), table.state_emb.row(1));
        assert_eq!(v.row(8), table.state_emb.row(1));
        assert_eq!(v.row(4), table.object_emb.row(2));
        assert_eq!(v.row(9), table.object_emb.row(0));
    }

    #[test]
    fn empty_prefix_gives_state_object_only() {
        let sp = space(2, 2);
        let table = PromptTable::init(&sp, 4, 0, 1).unwrap();
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &table).unwrap();
        let batch = build_prompts(&mut tape, &bound, &[(0, 1)]).unwrap();
        assert_eq!(batch.seq_len, 2);
        let v = tape.value(batch.tokens);
        assert_eq!(v.row(0), table.state_emb.row(0));
        assert_eq!(v.row(1), table.object_emb.row(1));
    }

    #[test]
    fn out_of_range_pair_rejected() {
        let sp = space(2, 2);
        let table = PromptTable::init(&sp, 4, 1, 1).unwrap();
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &table).unwrap();
        assert!(build_prompts(&mut tape, &bound, &[(2, 0)]).is_err());
        assert!(build_prompts(&mut tape, &bound, &[(0, 5)]).is_err());
    }

    #[test]
    fn gradient_reaches_only_referenced_rows() {
        let sp = space(3, 3);
        let table = PromptTable::init(&sp, 4, 2, 1).unwrap();
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &table).unwrap();
        let batch = build_prompts(&mut tape, &bound, &[(0, 1)]).unwrap();
        let sq = tape.mul(batch.tokens, batch.tokens).unwrap();
        let total = tape.sum(sq).unwrap();
        let g = tape.backward(total).unwrap();
        let gs = g.of(bound.state_emb);
        assert!(gs.row(0).iter().any(|&v| v != 0.0));
        assert!(gs.row(1).iter().chain(gs.row(2)).all(|&v| v == 0.0));
        let go = g.of(bound.object_emb);
        assert!(go.row(1).iter().any(|&v| v != 0.0));
        assert!(go.row(0).iter().chain(go.row(2)).all(|&v| v == 0.0));
    }
}
