//! Synthetic compositional datasets with a known latent structure.
//!
//! Each state `s` and object `o` gets a random unit latent `u_s`, `v_o`.
//! A sample of pair `(s, o)` is `normalize(u_s + v_o + noise * e)` with
//! `e ~ N(0, I)`.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::manifest::{Manifest, SampleRecord, Split, SplitPairs};
use crate::diff::Matrix;
use crate::encoder::normalize_rows;
use crate::error::{Error, Result};
use crate::space::Pair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub states: usize,
    pub objects: usize,
    pub dim: usize,
    /// Samples drawn for every pair listed in a split.
    pub samples_per_pair: usize,
    pub noise: f64,
    /// Fraction of all `n * m` pairs held out as unseen.
    pub unseen_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            states: 5,
            objects: 5,
            dim: 16,
            samples_per_pair: 20,
            noise: 0.05,
            unseen_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Latent prototypes behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    pub states: Matrix,
    pub objects: Matrix,
}

impl Latents {
    /// Noise-free unit centroid of a pair.
    pub fn centroid(&self, (s, o): Pair) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .states
            .row(s)
            .iter()
            .zip(self.objects.row(o))
            .map(|(a, b)| a + b)
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

/// Picks the unseen pairs: walks a shuffled pair list and holds a pair out
/// only while its state and object both keep at least one seen pair.
fn hold_out(
    n: usize,
    m: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Pair>, Vec<Pair>)> {
    let mut all: Vec<Pair> = (0..n).flat_map(|s| (0..m).map(move |o| (s, o))).collect();
    all.shuffle(rng);
    let mut state_left = vec![m; n];
    let mut object_left = vec![n; m];
    let mut unseen = HashSet::new();
    for &(s, o) in &all {
        if unseen.len() == count {
            break;
        }
        if state_left[s] > 1 && object_left[o] > 1 {
            state_left[s] -= 1;
            object_left[o] -= 1;
            unseen.insert((s, o));
        }
    }
    if unseen.len() < count {
        return Err(Error::Config(format!(
            "cannot hold out {count} of {} pairs while keeping every primitive seen",
            n * m
        )));
    }
    let mut seen: Vec<Pair> = all
        .iter()
        .copied()
        .filter(|p| !unseen.contains(p))
        .collect();
    let mut unseen: Vec<Pair> = unseen.into_iter().collect();
    seen.sort_unstable();
    unseen.sort_unstable();
    Ok((seen, unseen))
}

/// Generates a manifest. Train holds the seen pairs; validation and test
/// each hold the seen pairs plus the same unseen pairs, with fresh noise.
pub fn generate(spec: &SyntheticSpec) -> Result<(Manifest, Latents)> {
    let (n, m) = (spec.states, spec.objects);
    if n < 2 || m < 2 {
        return Err(Error::Config(format!(
            "need at least 2 states and 2 objects, got {n} and {m}"
        )));
    }
    if spec.dim == 0 || spec.samples_per_pair == 0 {
        return Err(Error::Config(
            "dim and samples_per_pair must be >= 1".into(),
        ));
    }
    if !(spec.unseen_fraction > 0.0 && spec.unseen_fraction < 1.0) {
        return Err(Error::Config(format!(
            "unseen_fraction must lie in (0, 1), got {}",
            spec.unseen_fraction
        )));
    }
    if !spec.noise.is_finite() || spec.noise < 0.0 {
        return Err(Error::Config(format!(
            "noise must be finite and >= 0, got {}",
            spec.noise
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let latents = Latents {
        states: normalize_rows(Matrix::random_normal(n, spec.dim, 1.0, &mut rng))?,
        objects: normalize_rows(Matrix::random_normal(m, spec.dim, 1.0, &mut rng))?,
    };
    let count = ((spec.unseen_fraction * (n * m) as f64).round() as usize).max(1);
    let (seen, unseen) = hold_out(n, m, count, &mut rng)?;

    let mut records = Vec::new();
    let mut rows = Vec::new();
    let both: Vec<Pair> = seen.iter().chain(&unseen).copied().collect();
    for (split, list) in [
        (Split::Train, &seen),
        (Split::Val, &both),
        (Split::Test, &both),
    ] {
        for &pair in list.iter() {
            let centre: Vec<f64> = latents
                .states
                .row(pair.0)
                .iter()
                .zip(latents.objects.row(pair.1))
                .map(|(a, b)| a + b)
                .collect();
            for _ in 0..spec.samples_per_pair {
                let noise = Matrix::random_normal(1, spec.dim, spec.noise, &mut rng);
                rows.extend(centre.iter().zip(noise.data()).map(|(c, e)| c + e));
                records.push(SampleRecord {
                    id: format!("{split}-{:06}", records.len()),
                    pair,
                    split,
                });
            }
        }
    }
    let features = normalize_rows(Matrix::from_vec(records.len(), spec.dim, rows)?)?;
    let pairs = SplitPairs {
        train: seen.clone(),
        val_seen: seen.clone(),
        val_unseen: unseen.clone(),
        test_seen: seen,
        test_unseen: unseen,
    };
    let manifest = Manifest::new(
        (0..n).map(|i| format!("s{i}")).collect(),
        (0..m).map(|i| format!("o{i}")).collect(),
        pairs,
        records,
        features,
    )?;
    Ok((manifest, latents))
}
