//! Decomposed fusion. Pair features are split into primitive features, mixed
//! with image tokens by attention blocks, then recomposed into pair scores.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::layers::join;
use crate::diff::{
    dense_apply, mlp_apply, AttentionWeights, Dense, Matrix, Mlp, ParamTree, Tape, Var,
};
use crate::error::{Error, Result};
use crate::space::{Pair, PairIndex};

/// Direction of cross-modal fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Decomposed text into image tokens.
    #[serde(rename = "t2i")]
    T2i,
    /// Image tokens into decomposed text.
    #[serde(rename = "i2t")]
    I2t,
    /// Both directions.
    #[serde(rename = "BiF")]
    Bif,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::T2i, Variant::I2t, Variant::Bif];

    pub fn fuses_image(self) -> bool {
        matches!(self, Variant::T2i | Variant::Bif)
    }

    pub fn fuses_text(self) -> bool {
        matches!(self, Variant::I2t | Variant::Bif)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::T2i => "t2i",
            Variant::I2t => "i2t",
            Variant::Bif => "BiF",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t2i" => Ok(Variant::T2i),
            "i2t" => Ok(Variant::I2t),
            "bif" => Ok(Variant::Bif),
            _ => Err(Error::Config(format!(
                "unknown fusion variant {s:?} (expected t2i, i2t or BiF)"
            ))),
        }
    }
}

/// One cross-attention followed by one self-attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionBlock<T = Matrix> {
    pub cross: AttentionWeights<T>,
    pub self_attn: AttentionWeights<T>,
}

impl<T> ParamTree<T> for FusionBlock<T> {
    type Mapped<U> = FusionBlock<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> FusionBlock<U> {
        FusionBlock {
            cross: self.cross.map_named(&join(prefix, "cross"), f),
            self_attn: self.self_attn.map_named(&join(prefix, "self_attn"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.cross.visit_mut(&join(prefix, "cross"), f);
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
    }
}

/// Trainable fusion parameters. Only the pieces a variant uses are present,
/// and none of them depends on the number of states, objects or pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams<T = Matrix> {
    /// Text-to-image projection, present when image tokens are fused.
    pub txt2img: Option<Dense<T>>,
    /// Image-to-text projection, present when text rows are fused.
    pub img2txt: Option<Dense<T>>,
    /// Blocks updating image tokens.
    pub image_blocks: Vec<FusionBlock<T>>,
    /// Blocks updating decomposed text rows.
    pub text_blocks: Vec<FusionBlock<T>>,
    /// Recomposition perceptron, present when text rows are fused.
    pub recompose: Option<Mlp<T>>,
}

impl FusionParams {
    pub fn init<R: Rng + ?Sized>(
        variant: Variant,
        dim: usize,
        blocks: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if blocks == 0 {
            return Err(Error::Config(
                "number of fusion blocks K must be >= 1".into(),
            ));
        }
        if dim == 0 {
            return Err(Error::Config("feature dimension must be >= 1".into()));
        }
        let block = |rng: &mut R| FusionBlock {
            cross: AttentionWeights::random(dim, rng),
            self_attn: AttentionWeights::random(dim, rng),
        };
        let mut p = FusionParams {
            txt2img: None,
            img2txt: None,
            image_blocks: Vec::new(),
            text_blocks: Vec::new(),
            recompose: None,
        };
        if variant.fuses_image() {
            p.txt2img = Some(Dense::random(dim, dim, rng));
            p.image_blocks = (0..blocks).map(|_| block(rng)).collect();
        }
        if variant.fuses_text() {
            p.img2txt = Some(Dense::random(dim, dim, rng));
            p.text_blocks = (0..blocks).map(|_| block(rng)).collect();
            p.recompose = Some(Mlp::identity_init(dim, rng));
        }
        Ok(p)
    }
}

impl<T> FusionParams<T> {
    /// K.
    pub fn blocks(&self) -> usize {
        self.image_blocks.len().max(self.text_blocks.len())
    }

    /// The variant these parameters were built for.
    pub fn variant(&self) -> Option<Variant> {
        match (self.image_blocks.is_empty(), self.text_blocks.is_empty()) {
            (false, true) => Some(Variant::T2i),
            (true, false) => Some(Variant::I2t),
            (false, false) => Some(Variant::Bif),
            (true, true) => None,
        }
    }
}

impl<T> ParamTree<T> for FusionParams<T> {
    type Mapped<U> = FusionParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> FusionParams<U> {
        FusionParams {
            txt2img: self
                .txt2img
                .as_ref()
                .map(|d| d.map_named(&join(prefix, "txt2img"), f)),
            img2txt: self
                .img2txt
                .as_ref()
                .map(|d| d.map_named(&join(prefix, "img2txt"), f)),
            image_blocks: self
                .image_blocks
                .iter()
                .enumerate()
                .map(|(k, b)| b.map_named(&join(prefix, &format!("image_blocks.{k}")), f))
                .collect(),
            text_blocks: self
                .text_blocks
                .iter()
                .enumerate()
                .map(|(k, b)| b.map_named(&join(prefix, &format!("text_blocks.{k}")), f))
                .collect(),
            recompose: self
                .recompose
                .as_ref()
                .map(|m| m.map_named(&join(prefix, "recompose"), f)),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        if let Some(d) = &mut self.txt2img {
            d.visit_mut(&join(prefix, "txt2img"), f);
        }
        if let Some(d) = &mut self.img2txt {
            d.visit_mut(&join(prefix, "img2txt"), f);
        }
        for (k, b) in self.image_blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("image_blocks.{k}")), f);
        }
        for (k, b) in self.text_blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("text_blocks.{k}")), f);
        }
        if let Some(m) = &mut self.recompose {
            m.visit_mut(&join(prefix, "recompose"), f);
        }
    }
}

/// Per-state then per-object means of the seen-pair features: `n + m` rows.
pub fn decompose(tape: &mut Tape, f_t: Var, index: &PairIndex, n: usize, m: usize) -> Result<Var> {
    if tape.shape(f_t).0 != index.len() {
        return Err(Error::shape(
            "decompose",
            format!(
                "{} feature rows for {} seen pairs",
                tape.shape(f_t).0,
                index.len()
            ),
        ));
    }
    let states = tape.mean_rows_by_group(f_t, &index.att_idx, n)?;
    let objects = tape.mean_rows_by_group(f_t, &index.obj_idx, m)?;
    tape.concat_rows(&[states, objects])
}

/// `MLP(f_s[s] * f_o[o])` for every requested pair.
pub fn recompose(
    tape: &mut Tape,
    concat: Var,
    pairs: &[Pair],
    n: usize,
    m: usize,
    mlp: &Mlp<Var>,
) -> Result<Var> {
    if tape.shape(concat).0 != n + m {
        return Err(Error::shape(
            "recompose",
            format!("{} rows, expected n + m = {}", tape.shape(concat).0, n + m),
        ));
    }
    let mut si = Vec::with_capacity(pairs.len());
    let mut oi = Vec::with_capacity(pairs.len());
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
        si.push(s);
        oi.push(n + o);
    }
    let fs = tape.select_rows(concat, &si)?;
    let fo = tape.select_rows(concat, &oi)?;
    let prod = tape.mul(fs, fo)?;
    mlp_apply(tape, prod, mlp)
}

/// Single-head attention with queries from `s2` and keys/values from `s1`.
pub fn cross_attend(tape: &mut Tape, s1: Var, s2: Var, w: &AttentionWeights<Var>) -> Result<Var> {
    Ok(cross_attend_with_weights(tape, s1, s2, w)?.0)
}

/// As [`cross_attend`], also returning the `|S2| x |S1|` attention matrix.
pub fn cross_attend_with_weights(
    tape: &mut Tape,
    s1: Var,
    s2: Var,
    w: &AttentionWeights<Var>,
) -> Result<(Var, Var)> {
    let (keys, d1) = tape.shape(s1);
    let (queries, d2) = tape.shape(s2);
    if keys == 0 || queries == 0 {
        return Err(Error::shape(
            "cross_attend",
            format!("empty token set ({keys} keys, {queries} queries)"),
        ));
    }
    if d1 != d2 {
        return Err(Error::shape(
            "cross_attend",
            format!("token dims {d1} and {d2}"),
        ));
    }
    let q = tape.matmul(s2, w.query)?;
    let k = tape.matmul(s1, w.key)?;
    let v = tape.matmul(s1, w.value)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / (tape.shape(q).1 as f64).sqrt())?;
    let attn = tape.softmax_rows(scaled)?;
    let out = tape.matmul(attn, v)?;
    Ok((out, attn))
}

/// Fused features per sample plus the last block's cross-attention maps.
#[derive(Debug, Clone)]
pub struct FusionOutput {
    /// Fused image tokens, one `L_v x d_f` var per sample.
    pub image: Option<Vec<Var>>,
    /// Fused decomposed text, one `(n + m) x d_f` var per sample.
    pub text: Option<Vec<Var>>,
    /// Image-token queries over text keys, `L_v x (n + m)` per sample.
    pub image_attention: Option<Vec<Var>>,
    /// Text queries over image-token keys, `(n + m) x L_v` per sample.
    pub text_attention: Option<Vec<Var>>,
}

/// `x <- x + cross(source, x)`, then `x <- x + self(x, x)`. The residual
/// paths keep each token's own identity; without them every fused text row
/// is a convex mix of the same few image tokens and all pairs score alike.
fn block_apply(
    tape: &mut Tape,
    source: Var,
    target: Var,
    block: &FusionBlock<Var>,
) -> Result<(Var, Var)> {
    let (c, attn) = cross_attend_with_weights(tape, source, target, &block.cross)?;
    let x = tape.add(target, c)?;
    let s = cross_attend(tape, x, x, &block.self_attn)?;
    Ok((tape.add(x, s)?, attn))
}

/// Runs the K fusion blocks for every sample. In BiF both streams are
/// updated from the previous block's values.
pub fn fuse(
    tape: &mut Tape,
    f_t_plus: Var,
    image_tokens: &[Var],
    params: &FusionParams<Var>,
    variant: Variant,
) -> Result<FusionOutput> {
    let k = params.blocks();
    if k == 0 {
        return Err(Error::Config("fusion needs at least one block".into()));
    }
    let missing =
        |what: &str| Error::Config(format!("{variant} fusion is missing {what} parameters"));
    if variant.fuses_image() && (params.txt2img.is_none() || params.image_blocks.len() != k) {
        return Err(missing("text-to-image"));
    }
    if variant.fuses_text() && (params.img2txt.is_none() || params.text_blocks.len() != k) {
        return Err(missing("image-to-text"));
    }

    let mut image = Vec::with_capacity(image_tokens.len());
    let mut text = Vec::with_capacity(image_tokens.len());
    let mut image_attention = Vec::new();
    let mut text_attention = Vec::new();
    // The projected text source only changes per sample under BiF.
    let shared_src = match (variant, &params.txt2img) {
        (Variant::T2i, Some(p)) => Some(dense_apply(tape, f_t_plus, p)?),
        _ => None,
    };

    for &tokens in image_tokens {
        let mut x = tokens;
        let mut y = f_t_plus;
        let mut attn_x = None;
        let mut attn_y = None;
        for b in 0..k {
            let next_x = if variant.fuses_image() {
                let src = match shared_src {
                    Some(s) => s,
                    None => dense_apply(
                        tape,
                        y,
                        params
                            .txt2img
                            .as_ref()
                            .ok_or_else(|| missing("text-to-image"))?,
                    )?,
                };
                let (v, a) = block_apply(tape, src, x, &params.image_blocks[b])?;
                attn_x = Some(a);
                Some(v)
            } else {
                None
            };
            let next_y = if variant.fuses_text() {
                let src = dense_apply(
                    tape,
                    x,
                    params
                        .img2txt
                        .as_ref()
                        .ok_or_else(|| missing("image-to-text"))?,
                )?;
                let (v, a) = block_apply(tape, src, y, &params.text_blocks[b])?;
                attn_y = Some(a);
                Some(v)
            } else {
                None
            };
            if let Some(v) = next_x {
                x = v;
            }
            if let Some(v) = next_y {
                y = v;
            }
        }
        if let Some(a) = attn_x {
            image.push(x);
            image_attention.push(a);
        }
        if let Some(a) = attn_y {
            text.push(y);
            text_attention.push(a);
        }
    }

    let fused_image = variant.fuses_image();
    let fused_text = variant.fuses_text();
    Ok(FusionOutput {
        image: fused_image.then_some(image),
        text: fused_text.then_some(text),
        image_attention: fused_image.then_some(image_attention),
        text_attention: fused_text.then_some(text_attention),
    })
}

/// `a b^T / tau`.
pub fn dot_scores(tape: &mut Tape, a: Var, b: Var, temperature: f64) -> Result<Var> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be finite and > 0, got {temperature}"
        )));
    }
    let bt = tape.transpose(b)?;
    let logits = tape.matmul(a, bt)?;
    tape.scale(logits, 1.0 / temperature)
}

fn pooled_images(tape: &mut Tape, fused: &[Var]) -> Result<Var> {
    let mut rows = Vec::with_capacity(fused.len());
    for &t in fused {
        rows.push(tape.mean_rows(t)?);
    }
    let stacked = tape.concat_rows(&rows)?;
    tape.l2_normalize_rows(stacked)
}

/// DFM logits `B x |pairs|`.
///
/// t2i scores pooled fused images against `f_t` (rows aligned with `pairs`);
/// i2t scores `f_v` against recomposed fused text; BiF scores pooled fused
/// images against recomposed fused text. `f_t` is ignored outside t2i.
#[allow(clippy::too_many_arguments)]
pub fn pair_scores(
    tape: &mut Tape,
    fused: &FusionOutput,
    params: &FusionParams<Var>,
    variant: Variant,
    f_t: Var,
    f_v: Var,
    pairs: &[Pair],
    n: usize,
    m: usize,
    temperature: f64,
) -> Result<Var> {
    let missing = || {
        Error::Config(format!(
            "{variant} scoring needs the matching fusion outputs"
        ))
    };
    let batch = tape.shape(f_v).0;
    match variant {
        Variant::T2i => {
            let img = fused.image.as_ref().ok_or_else(missing)?;
            if img.len() != batch {
                return Err(Error::shape(
                    "pair_scores",
                    format!("{} fused images for batch {batch}", img.len()),
                ));
            }
            if tape.shape(f_t).0 != pairs.len() {
                return Err(Error::shape(
                    "pair_scores",
                    format!("{} text rows for {} pairs", tape.shape(f_t).0, pairs.len()),
                ));
            }
            let pooled = pooled_images(tape, img)?;
            dot_scores(tape, pooled, f_t, temperature)
        }
        Variant::I2t | Variant::Bif => {
            let txt = fused.text.as_ref().ok_or_else(missing)?;
            let mlp = params.recompose.as_ref().ok_or_else(missing)?;
            if txt.len() != batch {
                return Err(Error::shape(
                    "pair_scores",
                    format!("{} fused texts for batch {batch}", txt.len()),
                ));
            }
            let queries = if variant == Variant::Bif {
                let img = fused.image.as_ref().ok_or_else(missing)?;
                pooled_images(tape, img)?
            } else {
                f_v
            };
            let mut rows = Vec::with_capacity(batch);
            for (b, &y) in txt.iter().enumerate() {
                let rec = recompose(tape, y, pairs, n, m, mlp)?;
                let rec = tape.l2_normalize_rows(rec)?;
                let q = tape.select_rows(queries, &[b])?;
                rows.push(dot_scores(tape, q, rec, temperature)?);
            }
            tape.concat_rows(&rows)
        }
    }
}
