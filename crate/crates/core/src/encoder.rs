//! Frozen reference encoders.
//!
//! The text tower mean-pools a prompt sequence, applies a fixed linear map
//! and L2-normalizes. The image tower maps a raw feature through a fixed base
//! map and `L_v` fixed heads into unit-norm tokens; the global feature is the
//! normalized token mean. Neither tower owns trainable state: their matrices
//! enter the tape as constants, so gradients pass through to the prompts
//! without ever reaching the encoder weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Matrix, Tape, Var, NORM_EPSILON};
use crate::error::{Error, Result};
use crate::prompt::PromptBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    /// `d x d_f`
    pub projection: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoder {
    /// `d_in x d_f`
    pub base: Matrix,
    /// `L_v` heads, each `d_f x d_f`
    pub heads: Vec<Matrix>,
}

/// Output of the image tower for a batch.
#[derive(Debug, Clone)]
pub struct ImageFeatures {
    /// `B x d_f`, unit rows.
    pub global: Matrix,
    /// One `L_v x d_f` token matrix per sample, unit rows.
    pub tokens: Vec<Matrix>,
}

impl ImageFeatures {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Sub-batch in the given sample order.
    pub fn select(&self, indices: &[usize]) -> Result<ImageFeatures> {
        let global = self.global.select_rows(indices)?;
        let tokens = indices.iter().map(|&i| self.tokens[i].clone()).collect();
        Ok(ImageFeatures { global, tokens })
    }
}

impl TextEncoder {
    pub fn random<R: rand::Rng + ?Sized>(dim: usize, feature_dim: usize, rng: &mut R) -> Self {
        Self {
            projection: Matrix::random_normal(dim, feature_dim, 1.0 / (dim as f64).sqrt(), rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.cols()
    }
}

impl ImageEncoder {
    pub fn random<R: rand::Rng + ?Sized>(
        input_dim: usize,
        feature_dim: usize,
        tokens: usize,
        rng: &mut R,
    ) -> Self {
        let base =
            Matrix::random_normal(input_dim, feature_dim, 1.0 / (input_dim as f64).sqrt(), rng);
        let head_std = 1.0 / (feature_dim as f64).sqrt();
        let heads = (0..tokens)
            .map(|_| Matrix::random_normal(feature_dim, feature_dim, head_std, rng))
            .collect();
        Self { base, heads }
    }

    pub fn input_dim(&self) -> usize {
        self.base.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.base.cols()
    }

    pub fn token_count(&self) -> usize {
        self.heads.len()
    }
}

/// Both frozen towers, drawn from one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoders {
    pub text: TextEncoder,
    pub image: ImageEncoder,
}

impl Encoders {
    pub fn init(
        prompt_dim: usize,
        input_dim: usize,
        feature_dim: usize,
        tokens: usize,
        seed: u64,
    ) -> Result<Self> {
        if prompt_dim == 0 || input_dim == 0 || feature_dim == 0 || tokens == 0 {
            return Err(Error::Config(format!(
                "encoder dimensions must be >= 1 (d={prompt_dim}, d_in={input_dim}, d_f={feature_dim}, L_v={tokens})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            text: TextEncoder::random(prompt_dim, feature_dim, &mut rng),
            image: ImageEncoder::random(input_dim, feature_dim, tokens, &mut rng),
        })
    }
}

/// Pair text features `f_t`: one unit row per prompt sequence.
pub fn encode_text(tape: &mut Tape, encoder: &TextEncoder, prompts: &PromptBatch) -> Result<Var> {
    let (rows, dim) = tape.shape(prompts.tokens);
    if prompts.seq_len == 0 || rows != prompts.pairs.len() * prompts.seq_len {
        return Err(Error::shape(
            "encode_text",
            format!(
                "{rows} token rows for {} sequences of length {}",
                prompts.pairs.len(),
                prompts.seq_len
            ),
        ));
    }
    if dim != encoder.projection.rows() {
        return Err(Error::shape(
            "encode_text",
            format!(
                "prompt dim {dim}, encoder expects {}",
                encoder.projection.rows()
            ),
        ));
    }
    let groups: Vec<usize> = (0..rows).map(|r| r / prompts.seq_len).collect();
    let pooled = tape.mean_rows_by_group(prompts.tokens, &groups, prompts.pairs.len())?;
    let w = tape.constant(encoder.projection.clone())?;
    let projected = tape.matmul(pooled, w)?;
    tape.l2_normalize_rows(projected)
}

/// Global features and token sequences for a batch of raw inputs.
pub fn encode_image(encoder: &ImageEncoder, raw: &Matrix) -> Result<ImageFeatures> {
    if raw.cols() != encoder.input_dim() {
        return Err(Error::shape(
            "encode_image",
            format!(
                "input dim {}, encoder expects {}",
                raw.cols(),
                encoder.input_dim()
            ),
        ));
    }
    let hidden = normalize_rows(raw.matmul(&encoder.base)?)?;
    let d_f = encoder.feature_dim();
    let mut tokens = vec![Matrix::zeros(encoder.token_count(), d_f); raw.rows()];
    for (l, head) in encoder.heads.iter().enumerate() {
        let projected = normalize_rows(hidden.matmul(head)?)?;
        for (b, row) in projected.row_iter().enumerate() {
            tokens[b].row_mut(l).copy_from_slice(row);
        }
    }
    let mut global = Matrix::zeros(raw.rows(), d_f);
    for (b, t) in tokens.iter().enumerate() {
        let out = global.row_mut(b);
        for row in t.row_iter() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    let global = normalize_rows(global)?;
    Ok(ImageFeatures { global, tokens })
}

/// Row-wise L2 normalization outside the tape.
pub fn normalize_rows(mut m: Matrix) -> Result<Matrix> {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("row {r} norm")));
        }
        if norm < NORM_EPSILON {
            return Err(Error::ZeroNorm { row: r });
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(m)
}
