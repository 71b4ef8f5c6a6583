//! Browser demo. One synthetic run is trained in the page; the bindings then
//! expose the calibrated bias sweep, the open-world feasibility filter and
//! the fusion attention maps of individual test samples.
//!
//! [`Demo`] holds the logic and is usable natively; [`DemoSession`] is the
//! thin JavaScript wrapper that returns JSON strings.

use dfsp_core::data::{generate, Manifest, Split, SyntheticSpec};
use dfsp_core::dfm::Variant;
use dfsp_core::diff::Matrix;
use dfsp_core::eval::{evaluate, harmonic_mean, Evaluation, MetricsReport, Phi};
use dfsp_core::model::DfspModel;
use dfsp_core::space::{CompositionSpace, Pair, World};
use dfsp_core::trainer::{train, TrainConfig};
use dfsp_core::{Error, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const CHUNK: usize = 64;

/// Seen and unseen accuracy at one calibration bias.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BiasPoint {
    pub bias: f64,
    pub seen_acc: f64,
    pub unseen_acc: f64,
    pub harmonic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairFeasibility {
    pub pair: String,
    pub seen: bool,
    pub q: f64,
    pub retained: bool,
}

/// Open-world view at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeasibilityView {
    pub threshold: f64,
    pub retained: usize,
    pub total: usize,
    pub pairs: Vec<PairFeasibility>,
    pub report: MetricsReport,
}

/// Attention weights of one test sample, `rows x cols`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionView {
    pub sample: usize,
    pub truth: String,
    pub predicted: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub weights: Vec<Vec<f64>>,
}

pub struct Demo {
    manifest: Manifest,
    space: CompositionSpace,
    model: DfspModel,
    test_x: Matrix,
    test_y: Vec<Pair>,
    closed: Evaluation,
}

impl Demo {
    /// Generates a synthetic dataset and trains on it with default
    /// hyperparameters apart from the given ones.
    pub fn new(
        states: usize,
        objects: usize,
        noise: f64,
        seed: u64,
        epochs: usize,
        variant: &str,
    ) -> Result<Self> {
        let spec = SyntheticSpec {
            states,
            objects,
            noise,
            seed,
            ..SyntheticSpec::default()
        };
        let (manifest, _) = generate(&spec)?;
        let cfg = TrainConfig {
            epochs,
            seed,
            variant: variant.parse::<Variant>()?,
            ..TrainConfig::default()
        };
        let model = train(&manifest, &cfg)?.best.model;
        let space = manifest.space(World::Closed)?;
        let (test_x, test_y) = manifest.split_data(Split::Test)?;
        let closed = evaluate(&model, &space, &test_x, &test_y, 0.0, &Phi::Learned, CHUNK)?;
        Ok(Self {
            manifest,
            space,
            model,
            test_x,
            test_y,
            closed,
        })
    }

    pub fn report(&self) -> &MetricsReport {
        &self.closed.report
    }

    pub fn test_samples(&self) -> usize {
        self.test_y.len()
    }

    /// Closed-world accuracies with `bias` added to every unseen column.
    /// Ties go to the lowest column, as in the sweep.
    pub fn accuracy_at(&self, bias: f64) -> BiasPoint {
        let p = &self.closed.prediction;
        let mut hits = [[0usize; 2]; 2];
        for (i, truth) in self.test_y.iter().enumerate() {
            let adjusted = |j: usize| {
                p.scores.get(i, j)
                    + if self.space.is_seen(p.columns[j]) {
                        0.0
                    } else {
                        bias
                    }
            };
            let best =
                (1..p.columns.len()).fold(0, |b, j| if adjusted(j) > adjusted(b) { j } else { b });
            let side = usize::from(!self.space.is_seen(*truth));
            hits[side][0] += usize::from(p.columns[best] == *truth);
            hits[side][1] += 1;
        }
        let acc = |h: [usize; 2]| {
            if h[1] == 0 {
                0.0
            } else {
                h[0] as f64 / h[1] as f64
            }
        };
        let (seen_acc, unseen_acc) = (acc(hits[0]), acc(hits[1]));
        BiasPoint {
            bias,
            seen_acc,
            unseen_acc,
            harmonic: harmonic_mean(seen_acc, unseen_acc),
        }
    }

    /// Feasibility of every pair from the learned prompt rows and the
    /// open-world metrics over the retained pairs.
    pub fn feasibility(&self, threshold: f64) -> Result<FeasibilityView> {
        let open = self.space.with_world(World::Open);
        let ev = evaluate(
            &self.model,
            &open,
            &self.test_x,
            &self.test_y,
            threshold,
            &Phi::Learned,
            CHUNK,
        )?;
        let f = ev
            .feasibility
            .ok_or_else(|| Error::Config("open world returned no feasibility scores".into()))?;
        let pairs: Vec<PairFeasibility> = f
            .pairs
            .iter()
            .zip(&f.q)
            .map(|(&p, &q)| PairFeasibility {
                pair: open.pair_name(p),
                seen: open.is_seen(p),
                q,
                retained: ev.prediction.columns.contains(&p),
            })
            .collect();
        Ok(FeasibilityView {
            threshold,
            retained: ev.prediction.columns.len(),
            total: pairs.len(),
            pairs,
            report: ev.report,
        })
    }

    /// Last fusion block's cross-attention for test sample `sample`.
    pub fn attention(&self, sample: usize) -> Result<AttentionView> {
        if sample >= self.test_samples() {
            return Err(Error::Config(format!(
                "sample {sample} out of range (0..{})",
                self.test_samples()
            )));
        }
        let images = self.model.encode(&self.test_x.select_rows(&[sample])?)?;
        let map = self.model.attention_maps(&self.space, &images)?.remove(0);
        let primitives: Vec<String> = self
            .manifest
            .states()
            .iter()
            .chain(self.manifest.objects())
            .cloned()
            .collect();
        let tokens = |k: usize| (0..k).map(|t| format!("token {t}")).collect::<Vec<_>>();
        let (rows, cols) = if map.cols() == primitives.len() {
            (tokens(map.rows()), primitives)
        } else {
            (primitives, tokens(map.cols()))
        };
        Ok(AttentionView {
            sample,
            truth: self.space.pair_name(self.test_y[sample]),
            predicted: self.space.pair_name(self.closed.prediction.labels[sample]),
            rows,
            cols,
            weights: map.row_iter().map(<[f64]>::to_vec).collect(),
        })
    }
}

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn json<T: Serialize>(v: &T) -> std::result::Result<String, JsError> {
    serde_json::to_string(v).map_err(js)
}

/// JavaScript handle on a trained [`Demo`]. Methods return JSON strings.
#[wasm_bindgen]
pub struct DemoSession(Demo);

#[wasm_bindgen]
impl DemoSession {
    #[wasm_bindgen(constructor)]
    pub fn new(
        states: usize,
        objects: usize,
        noise: f64,
        seed: u32,
        epochs: usize,
        variant: &str,
    ) -> std::result::Result<DemoSession, JsError> {
        Demo::new(states, objects, noise, u64::from(seed), epochs, variant)
            .map(DemoSession)
            .map_err(js)
    }

    /// Closed-world metrics report including the full curve.
    pub fn report(&self) -> std::result::Result<String, JsError> {
        json(self.0.report())
    }

    #[wasm_bindgen(js_name = testSamples)]
    pub fn test_samples(&self) -> usize {
        self.0.test_samples()
    }

    #[wasm_bindgen(js_name = accuracyAt)]
    pub fn accuracy_at(&self, bias: f64) -> std::result::Result<String, JsError> {
        json(&self.0.accuracy_at(bias))
    }

    pub fn feasibility(&self, threshold: f64) -> std::result::Result<String, JsError> {
        json(&self.0.feasibility(threshold).map_err(js)?)
    }

    pub fn attention(&self, sample: usize) -> std::result::Result<String, JsError> {
        json(&self.0.attention(sample).map_err(js)?)
    }
}
