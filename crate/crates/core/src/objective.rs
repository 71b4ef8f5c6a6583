//! Cross-entropy terms and their weighted total.

use serde::{Deserialize, Serialize};

use crate::dfm::dot_scores;
use crate::diff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the state and object term.
    pub alpha: f64,
    /// Weight of the soft-prompt term.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_dfm: f64,
    pub l_st_obj: f64,
    pub l_spm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_dfm: f64,
    pub l_st_obj: f64,
    pub l_spm: f64,
    pub total: f64,
}

/// Soft-prompt branch: image features against pair text features.
pub fn loss_spm(
    tape: &mut Tape,
    f_v: Var,
    f_t: Var,
    labels: &[usize],
    temperature: f64,
) -> Result<Var> {
    let logits = dot_scores(tape, f_v, f_t, temperature)?;
    tape.cross_entropy(logits, labels)
}

/// State and object classification against normalized decomposed features.
pub fn loss_st_obj(
    tape: &mut Tape,
    f_v: Var,
    f_s: Var,
    f_o: Var,
    state_labels: &[usize],
    object_labels: &[usize],
    temperature: f64,
) -> Result<Var> {
    let fs = tape.l2_normalize_rows(f_s)?;
    let fo = tape.l2_normalize_rows(f_o)?;
    let ls = dot_scores(tape, f_v, fs, temperature)?;
    let lo = dot_scores(tape, f_v, fo, temperature)?;
    let a = tape.cross_entropy(ls, state_labels)?;
    let b = tape.cross_entropy(lo, object_labels)?;
    tape.add(a, b)
}

pub fn loss_dfm(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// `l_dfm + alpha * l_st_obj + beta * l_spm` on scalars.
pub fn total_loss(parts: LossParts, weights: LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    for (name, v) in [
        ("l_dfm", parts.l_dfm),
        ("l_st_obj", parts.l_st_obj),
        ("l_spm", parts.l_spm),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    Ok(LossBreakdown {
        l_dfm: parts.l_dfm,
        l_st_obj: parts.l_st_obj,
        l_spm: parts.l_spm,
        total: parts.l_dfm + weights.alpha * parts.l_st_obj + weights.beta * parts.l_spm,
    })
}

/// Graph version of [`total_loss`]. A term with zero weight is left out of
/// the graph entirely, so it contributes no gradient at all.
pub fn combine_losses(
    tape: &mut Tape,
    l_dfm: Var,
    l_st_obj: Var,
    l_spm: Var,
    weights: LossWeights,
) -> Result<Var> {
    weights.validate()?;
    let mut total = l_dfm;
    for (term, w) in [(l_st_obj, weights.alpha), (l_spm, weights.beta)] {
        if w != 0.0 {
            let scaled = tape.scale(term, w)?;
            total = tape.add(total, scaled)?;
        }
    }
    Ok(total)
}
