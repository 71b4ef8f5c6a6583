//! Generalized evaluation: calibrated bias sweep, S / U / H / AUC, and the
//! open-world feasibility filter.
//!
//! A bias `b` is added to every unseen-pair column before the argmax. For a
//! given sample only the gap between its best seen and best unseen score
//! matters, so accuracies are piecewise constant in `b` and change only at
//! those gaps. The sweep evaluates one bias inside every constant piece
//! (midpoints between consecutive distinct gaps) plus the two endpoints
//! `±(score range + 1)`, which makes it exact.

use serde::{Deserialize, Serialize};

use crate::diff::{cosine, Matrix};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, DfspModel};
use crate::space::{CompositionSpace, Pair, World};

/// Default open-world feasibility threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub bias: f64,
    pub seen_acc: f64,
    pub unseen_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub world: World,
    pub best_seen: f64,
    pub best_unseen: f64,
    pub best_harmonic: f64,
    pub auc: f64,
    /// First swept bias attaining `best_harmonic`.
    pub best_bias: f64,
    pub seen_samples: usize,
    pub unseen_samples: usize,
    pub columns: usize,
    pub curve: Vec<CurvePoint>,
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b <= 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Area under the `(seen_acc, unseen_acc)` curve: points sorted by seen
/// accuracy (ties by descending unseen accuracy), trapezoid rule.
pub fn curve_auc(points: &[CurvePoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.seen_acc, p.unseen_acc)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Best column and score over `cols`; ties go to the lowest column.
fn best_of(row: &[f64], cols: &[usize]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for &j in cols {
        if best.is_none_or(|(_, v)| row[j] > v) {
            best = Some((j, row[j]));
        }
    }
    best
}

/// Exact bias sweep over `scores` (`samples x columns`).
pub fn bias_sweep(
    scores: &Matrix,
    columns: &[Pair],
    true_pairs: &[Pair],
    space: &CompositionSpace,
) -> Result<MetricsReport> {
    if scores.cols() != columns.len() || scores.rows() != true_pairs.len() {
        return Err(Error::shape(
            "bias_sweep",
            format!(
                "{:?} scores for {} samples and {} columns",
                scores.shape(),
                true_pairs.len(),
                columns.len()
            ),
        ));
    }
    if !scores.is_finite() {
        return Err(Error::NonFinite("scores".into()));
    }
    let seen_cols: Vec<usize> = (0..columns.len())
        .filter(|&j| space.is_seen(columns[j]))
        .collect();
    let unseen_cols: Vec<usize> = (0..columns.len())
        .filter(|&j| !space.is_seen(columns[j]))
        .collect();

    // Gap of each sample at which the unseen side takes over, for samples
    // that are right on the side their label belongs to.
    let mut seen_gaps = Vec::new();
    let mut unseen_gaps = Vec::new();
    let mut all_gaps = Vec::new();
    let (mut n_seen, mut n_unseen) = (0usize, 0usize);
    for (row, truth) in scores.row_iter().zip(true_pairs) {
        let s = best_of(row, &seen_cols);
        let u = best_of(row, &unseen_cols);
        let gap = match (s, u) {
            (Some((_, a)), Some((_, b))) => a - b,
            (Some(_), None) => f64::INFINITY,
            _ => f64::NEG_INFINITY,
        };
        if gap.is_finite() {
            all_gaps.push(gap);
        }
        let truth_col = columns.iter().position(|c| c == truth);
        if space.is_seen(*truth) {
            n_seen += 1;
            if s.is_some_and(|(j, _)| Some(j) == truth_col) {
                seen_gaps.push(gap);
            }
        } else {
            n_unseen += 1;
            if u.is_some_and(|(j, _)| Some(j) == truth_col) {
                unseen_gaps.push(gap);
            }
        }
    }
    if n_seen == 0 {
        return Err(Error::MissingSplit("no seen test samples"));
    }
    if n_unseen == 0 {
        return Err(Error::MissingSplit("no unseen test samples"));
    }
    seen_gaps.sort_by(f64::total_cmp);
    unseen_gaps.sort_by(f64::total_cmp);
    all_gaps.sort_by(f64::total_cmp);
    all_gaps.dedup();

    let lo = scores.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let edge = (hi - lo) + 1.0;
    let mut biases = Vec::with_capacity(all_gaps.len() + 1);
    biases.push(-edge);
    biases.extend(all_gaps.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    biases.push(edge);

    let curve: Vec<CurvePoint> = biases
        .iter()
        .map(|&b| {
            // Seen side wins while b < gap; unseen side wins while b > gap.
            let seen_hits = seen_gaps.len() - seen_gaps.partition_point(|&g| g <= b);
            let unseen_hits = unseen_gaps.partition_point(|&g| g < b);
            CurvePoint {
                bias: b,
                seen_acc: seen_hits as f64 / n_seen as f64,
                unseen_acc: unseen_hits as f64 / n_unseen as f64,
            }
        })
        .collect();

    let mut best_h = -1.0;
    let mut best_bias = 0.0;
    for p in &curve {
        let h = harmonic_mean(p.seen_acc, p.unseen_acc);
        if h > best_h {
            best_h = h;
            best_bias = p.bias;
        }
    }
    Ok(MetricsReport {
        world: space.world(),
        best_seen: curve.iter().map(|p| p.seen_acc).fold(0.0, f64::max),
        best_unseen: curve.iter().map(|p| p.unseen_acc).fold(0.0, f64::max),
        best_harmonic: best_h,
        auc: curve_auc(&curve),
        best_bias,
        seen_samples: n_seen,
        unseen_samples: n_unseen,
        columns: columns.len(),
        curve,
    })
}

/// Per-pair feasibility over the full `n x m` product, in open-world order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityScores {
    pub pairs: Vec<Pair>,
    pub q: Vec<f64>,
    pub threshold: f64,
}

/// Feasibility of every pair from primitive embeddings `phi` (one row per
/// state, one per object). The object term of `(s, o)` is the best cosine
/// between `o` and another object seen with `s`; the state term mirrors it.
/// A term with no such partner is `-1`.
pub fn feasibility_scores(
    space: &CompositionSpace,
    state_emb: &Matrix,
    object_emb: &Matrix,
) -> Result<Vec<f64>> {
    let (n, m) = (space.n_states(), space.n_objects());
    if state_emb.rows() != n || object_emb.rows() != m || state_emb.cols() != object_emb.cols() {
        return Err(Error::shape(
            "feasibility_scores",
            format!(
                "embeddings {:?} and {:?} for {n} states and {m} objects",
                state_emb.shape(),
                object_emb.shape()
            ),
        ));
    }
    if !state_emb.is_finite() || !object_emb.is_finite() {
        return Err(Error::NonFinite("primitive embeddings".into()));
    }
    for (r, norm) in state_emb
        .row_norms()
        .into_iter()
        .chain(object_emb.row_norms())
        .enumerate()
    {
        if norm == 0.0 {
            return Err(Error::ZeroNorm { row: r });
        }
    }
    let mut objects_of = vec![Vec::new(); n];
    let mut states_of = vec![Vec::new(); m];
    for &(s, o) in space.seen_pairs() {
        objects_of[s].push(o);
        states_of[o].push(s);
    }
    let best = |emb: &Matrix, x: usize, partners: &[usize]| {
        partners
            .iter()
            .filter(|&&y| y != x)
            .map(|&y| cosine(emb.row(x), emb.row(y)))
            .fold(-1.0, f64::max)
    };
    let mut q = Vec::with_capacity(n * m);
    for (s, partners_o) in objects_of.iter().enumerate() {
        for (o, partners_s) in states_of.iter().enumerate() {
            let q_o = best(object_emb, o, partners_o);
            let q_s = best(state_emb, s, partners_s);
            q.push((q_s + q_o) / 2.0);
        }
    }
    Ok(q)
}

/// Open-world pairs kept at threshold `t`: every seen pair plus every pair
/// with feasibility strictly above `t`, in open-world order.
pub fn feasibility_filter(
    space: &CompositionSpace,
    state_emb: &Matrix,
    object_emb: &Matrix,
    threshold: f64,
) -> Result<(Vec<Pair>, FeasibilityScores)> {
    if !threshold.is_finite() {
        return Err(Error::Config(format!(
            "threshold must be finite, got {threshold}"
        )));
    }
    let q = feasibility_scores(space, state_emb, object_emb)?;
    let m = space.n_objects();
    let pairs: Vec<Pair> = (0..q.len()).map(|k| (k / m, k % m)).collect();
    let retained = pairs
        .iter()
        .zip(&q)
        .filter(|(p, &v)| space.is_seen(**p) || v > threshold)
        .map(|(p, _)| *p)
        .collect();
    Ok((
        retained,
        FeasibilityScores {
            pairs,
            q,
            threshold,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub columns: Vec<Pair>,
    /// `samples x columns`.
    pub scores: Matrix,
    pub labels: Vec<Pair>,
}

/// Scores raw inputs against `columns` and takes the argmax per row.
pub fn predict(
    model: &DfspModel,
    space: &CompositionSpace,
    raw: &Matrix,
    columns: &[Pair],
    chunk: usize,
) -> Result<Prediction> {
    model.check_space(space)?;
    let images = model.encode(raw)?;
    let scores = model.scores(space, &images, columns, chunk)?;
    let labels = argmax_rows(&scores)
        .into_iter()
        .map(|j| columns[j])
        .collect();
    Ok(Prediction {
        columns: columns.to_vec(),
        scores,
        labels,
    })
}

/// Where feasibility embeddings come from in the open world.
#[derive(Debug, Clone, PartialEq)]
pub enum Phi {
    /// The model's learned state and object prompt rows.
    Learned,
    /// Externally supplied rows, aligned with the space's primitives.
    External { states: Matrix, objects: Matrix },
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub prediction: Prediction,
    pub feasibility: Option<FeasibilityScores>,
}

/// Full evaluation in the world of `space`. The open world is pruned by the
/// feasibility filter at `threshold` before scoring.
pub fn evaluate(
    model: &DfspModel,
    space: &CompositionSpace,
    raw: &Matrix,
    true_pairs: &[Pair],
    threshold: f64,
    phi: &Phi,
    chunk: usize,
) -> Result<Evaluation> {
    let (columns, feasibility) = match space.world() {
        World::Closed => (space.test_pairs().to_vec(), None),
        World::Open => {
            let (s, o) = match phi {
                Phi::Learned => (
                    &model.params.prompt.state_emb,
                    &model.params.prompt.object_emb,
                ),
                Phi::External { states, objects } => (states, objects),
            };
            let (kept, scores) = feasibility_filter(space, s, o, threshold)?;
            (kept, Some(scores))
        }
    };
    let prediction = predict(model, space, raw, &columns, chunk)?;
    let report = bias_sweep(&prediction.scores, &columns, true_pairs, space)?;
    Ok(Evaluation {
        report,
        prediction,
        feasibility,
    })
}

/// Pretty JSON with a trailing newline.
pub fn report_json(report: &MetricsReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

/// `bias,seen_acc,unseen_acc` rows in sweep order, shortest round-trip
/// decimal formatting.
pub fn curve_csv(report: &MetricsReport) -> String {
    let mut out = String::from("bias,seen_acc,unseen_acc\n");
    for p in &report.curve {
        out.push_str(&format!("{},{},{}\n", p.bias, p.seen_acc, p.unseen_acc));
    }
    out
}
