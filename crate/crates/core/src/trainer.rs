//! Mini-batch Adam training with validation-loss checkpoint selection.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Manifest, Split};
use crate::dfm::Variant;
use crate::diff::{named_matrices, Matrix, ParamTree};
use crate::encoder::ImageFeatures;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, label_positions, DfspModel, ModelConfig};
use crate::objective::{LossBreakdown, LossWeights};
use crate::space::{CompositionSpace, Pair, World};

const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;

/// Every knob of a training run. Missing keys in a config file take the
/// defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    /// Fusion blocks `K`.
    pub blocks: usize,
    pub variant: Variant,
    pub temperature: f64,
    /// Prompt dimension `d`.
    pub prompt_dim: usize,
    /// Joint feature dimension `d_f`.
    pub feature_dim: usize,
    /// Prefix length `p`.
    pub prefix_len: usize,
    /// Image tokens `L_v`.
    pub image_tokens: usize,
    /// `false` trains the soft-prompt branch alone.
    pub use_dfm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let w = LossWeights::default();
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            alpha: w.alpha,
            beta: w.beta,
            blocks: m.blocks,
            variant: m.variant,
            temperature: m.temperature,
            prompt_dim: m.prompt_dim,
            feature_dim: m.feature_dim,
            prefix_len: m.prefix_len,
            image_tokens: m.image_tokens,
            use_dfm: m.use_dfm,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            use_dfm: self.use_dfm,
            prompt_dim: self.prompt_dim,
            feature_dim: self.feature_dim,
            input_dim,
            prefix_len: self.prefix_len,
            image_tokens: self.image_tokens,
            blocks: self.blocks,
            temperature: self.temperature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.adam().validate()?;
        self.weights().validate()?;
        self.model_config(1).validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    /// A zero learning rate is accepted and freezes every parameter.
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("adam_beta1", self.beta1), ("adam_beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "adam_epsilon must be finite and > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// First and second moments in parameter-tree order, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new<P: ParamTree<Matrix>>(params: &P) -> Self {
        let zeros: Vec<Matrix> = named_matrices(params)
            .into_iter()
            .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every leaf of `params`.
pub fn adam_step<P: ParamTree<Matrix>>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let grads: Vec<(String, Matrix)> = named_matrices(grads);
    if grads.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} gradient groups for {} moment groups",
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for ((name, g), m) in grads.iter().zip(&state.m) {
        if g.shape() != m.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("gradient {name} has shape {:?}", g.shape()),
            ));
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let c1 = 1.0 - cfg.beta1.powf(t);
    let c2 = 1.0 - cfg.beta2.powf(t);
    let mut k = 0;
    let mut err = None;
    params.visit_mut("", &mut |name, p| {
        if p.shape() != grads[k].1.shape() {
            err.get_or_insert_with(|| {
                Error::shape(
                    "adam_step",
                    format!("parameter {name} has shape {:?}", p.shape()),
                )
            });
            return;
        }
        let g = grads[k].1.data();
        let m = state.m[k].data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = state.v[k].data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let (m, v) = (state.m[k].data(), state.v[k].data());
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            *pi -= cfg.learning_rate * (mi / c1) / ((vi / c2).sqrt() + cfg.epsilon);
        }
        k += 1;
    });
    err.map_or(Ok(()), Err)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_dfm: f64,
    pub l_st_obj: f64,
    pub l_spm: f64,
    pub total: f64,
    pub val_total: f64,
}

pub const CHECKPOINT_FORMAT: &str = "dfsp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained model plus everything needed to reload and audit it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: DfspModel,
    /// Training space: seen = train pairs, unseen = test-unseen pairs.
    pub space: CompositionSpace,
    /// 1-based epoch the parameters were taken after.
    pub epoch: usize,
    pub val_loss: f64,
    pub split_hashes: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl NamedArray {
    fn new(name: String, m: &Matrix) -> Self {
        Self {
            name,
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().to_vec(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: TrainConfig,
    model_config: ModelConfig,
    space: CompositionSpace,
    epoch: usize,
    val_loss: f64,
    split_hashes: BTreeMap<String, String>,
    params: Vec<NamedArray>,
    frozen: Vec<NamedArray>,
}

fn frozen_arrays(model: &DfspModel) -> Vec<(String, &Matrix)> {
    let enc = &model.encoders;
    let mut out = vec![
        ("text.projection".to_string(), &enc.text.projection),
        ("image.base".to_string(), &enc.image.base),
    ];
    out.extend(
        enc.image
            .heads
            .iter()
            .enumerate()
            .map(|(l, h)| (format!("image.heads.{l}"), h)),
    );
    out
}

fn take(arrays: &[NamedArray], expect: &[(String, &Matrix)], what: &str) -> Result<Vec<Matrix>> {
    if arrays.len() != expect.len() {
        return Err(Error::Checkpoint(format!(
            "{} {what} arrays, expected {}",
            arrays.len(),
            expect.len()
        )));
    }
    arrays
        .iter()
        .zip(expect)
        .map(|(a, (name, m))| {
            if a.name != *name || (a.rows, a.cols) != m.shape() {
                return Err(Error::Checkpoint(format!(
                    "{what} array {:?} {}x{}, expected {name:?} {:?}",
                    a.name,
                    a.rows,
                    a.cols,
                    m.shape()
                )));
            }
            let v = Matrix::from_vec(a.rows, a.cols, a.data.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            if !v.is_finite() {
                return Err(Error::Checkpoint(format!("non-finite value in {name}")));
            }
            Ok(v)
        })
        .collect()
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            model_config: self.model.config.clone(),
            space: self.space.clone(),
            epoch: self.epoch,
            val_loss: self.val_loss,
            split_hashes: self.split_hashes.clone(),
            params: named_matrices(&self.model.params)
                .into_iter()
                .map(|(n, m)| NamedArray::new(n, &m))
                .collect(),
            frozen: frozen_arrays(&self.model)
                .into_iter()
                .map(|(n, m)| NamedArray::new(n, m))
                .collect(),
        };
        Ok(serde_json::to_string(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {:?} version {}",
                file.format, file.version
            )));
        }
        // Rebuild the skeleton for names and shapes, then overwrite values.
        let mut model = DfspModel::init(file.model_config, &file.space, 0)?;
        let expect = named_matrices(&model.params);
        let refs: Vec<(String, &Matrix)> = expect.iter().map(|(n, m)| (n.clone(), m)).collect();
        let values = take(&file.params, &refs, "parameter")?;
        model.params = model.params.with_values(&values)?;
        let frozen = take(&file.frozen, &frozen_arrays(&model), "frozen")?;
        let mut it = frozen.into_iter();
        model.encoders.text.projection = it.next().expect("projection");
        model.encoders.image.base = it.next().expect("base");
        model.encoders.image.heads = it.collect();
        Ok(Self {
            config: file.config,
            model,
            space: file.space,
            epoch: file.epoch,
            val_loss: file.val_loss,
            split_hashes: file.split_hashes,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Errors unless `space` has the same primitives and seen pairs as the
    /// training space.
    pub fn check_compatible(&self, space: &CompositionSpace) -> Result<()> {
        let ours = &self.space;
        if ours.states() != space.states() || ours.objects() != space.objects() {
            return Err(Error::Checkpoint(
                "state or object names differ from the training data".into(),
            ));
        }
        if ours.seen_pairs() != space.seen_pairs() {
            return Err(Error::Checkpoint(
                "seen pairs differ from the training data".into(),
            ));
        }
        Ok(())
    }
}

/// Training log as JSON lines.
pub fn log_jsonl(log: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub log: Vec<EpochRecord>,
    /// Parameters after the final epoch.
    pub last: DfspModel,
}

/// Mean loss over `images` in chunks, weighted by chunk size.
pub fn mean_loss(
    model: &DfspModel,
    space: &CompositionSpace,
    images: &ImageFeatures,
    labels: &[Pair],
    candidates: &[Pair],
    weights: LossWeights,
    chunk: usize,
) -> Result<LossBreakdown> {
    let mut acc = [0.0; 4];
    let mut start = 0;
    while start < images.len() {
        let end = (start + chunk.max(1)).min(images.len());
        let idx: Vec<usize> = (start..end).collect();
        let mut tape = crate::diff::Tape::new();
        let bound = crate::diff::bind_params(&mut tape, &model.params)?;
        let (_, b) = model.loss(
            &mut tape,
            &bound,
            space,
            &images.select(&idx)?,
            &labels[start..end],
            candidates,
            weights,
        )?;
        let w = (end - start) as f64;
        for (a, v) in acc.iter_mut().zip([b.l_dfm, b.l_st_obj, b.l_spm, b.total]) {
            *a += w * v;
        }
        start = end;
    }
    let n = images.len().max(1) as f64;
    Ok(LossBreakdown {
        l_dfm: acc[0] / n,
        l_st_obj: acc[1] / n,
        l_spm: acc[2] / n,
        total: acc[3] / n,
    })
}

/// Fraction of samples whose top-scoring candidate is their label.
pub fn accuracy(
    model: &DfspModel,
    space: &CompositionSpace,
    raw: &Matrix,
    labels: &[Pair],
    candidates: &[Pair],
) -> Result<f64> {
    let images = model.encode(raw)?;
    let targets = label_positions(labels, candidates)?;
    let pred = argmax_rows(&model.scores(space, &images, candidates, 64)?);
    let hits = pred.iter().zip(&targets).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Divergence {
            epoch,
            batch,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Trains on the manifest's train split and keeps the parameters with the
/// lowest validation loss (earliest epoch on ties).
pub fn train(manifest: &Manifest, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let space = manifest.space(World::Closed)?;
    let val_space = manifest.val_space()?;
    let (train_x, train_y) = manifest.split_data(Split::Train)?;
    let (val_x, val_y) = manifest.split_data(Split::Val)?;
    if train_y.is_empty() {
        return Err(Error::MissingSplit("no train samples"));
    }
    if val_y.is_empty() {
        return Err(Error::MissingSplit("no validation samples"));
    }
    let weights = config.weights();
    let adam = config.adam();
    let mut model = DfspModel::init(
        config.model_config(manifest.feature_dim()),
        &space,
        config.seed,
    )?;
    let train_images = model.encode(&train_x)?;
    let val_images = model.encode(&val_x)?;
    let seen = space.seen_pairs().to_vec();
    let val_candidates = val_space.test_pairs().to_vec();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
    let mut state = AdamState::new(&model.params);
    let mut order: Vec<usize> = (0..train_y.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, DfspModel)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut acc = [0.0; 4];
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let images = train_images.select(idx)?;
            let labels: Vec<Pair> = idx.iter().map(|&i| train_y[i]).collect();
            let (b, grads) = model
                .loss_and_grad(&space, &images, &labels, &seen, weights)
                .map_err(|e| diverged(e, epoch, batch))?;
            if !b.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch,
                    loss: b.total,
                });
            }
            adam_step(&mut model.params, &grads, &mut state, &adam)?;
            let mut finite = true;
            model.params.visit("", &mut |_, m| finite &= m.is_finite());
            if !finite {
                return Err(Error::Divergence {
                    epoch,
                    batch,
                    loss: b.total,
                });
            }
            let w = idx.len() as f64;
            for (a, v) in acc.iter_mut().zip([b.l_dfm, b.l_st_obj, b.l_spm, b.total]) {
                *a += w * v;
            }
        }
        let n = train_y.len() as f64;
        let val = mean_loss(
            &model,
            &space,
            &val_images,
            &val_y,
            &val_candidates,
            weights,
            config.batch_size,
        )
        .map_err(|e| diverged(e, epoch, 0))?;
        log.push(EpochRecord {
            epoch,
            l_dfm: acc[0] / n,
            l_st_obj: acc[1] / n,
            l_spm: acc[2] / n,
            total: acc[3] / n,
            val_total: val.total,
        });
        if best.as_ref().is_none_or(|(_, v, _)| val.total < *v) {
            best = Some((epoch, val.total, model.clone()));
        }
    }

    let (epoch, val_loss, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: Checkpoint {
            config: config.clone(),
            model: best_model,
            space,
            epoch,
            val_loss,
            split_hashes: manifest.split_hashes(),
        },
        log,
        last: model,
    })
}
