//! The full model: frozen towers around soft prompts, with an optional fusion branch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dfm::{decompose, dot_scores, fuse, pair_scores, FusionOutput, FusionParams, Variant};
use crate::diff::layers::join;
use crate::diff::{
    bind_params, grad_check, named_matrices, GradCheckReport, Matrix, ParamTree, Tape, Var,
};
use crate::encoder::{encode_image, encode_text, Encoders, ImageFeatures};
use crate::error::{Error, Result};
use crate::objective::{
    combine_losses, loss_dfm, loss_st_obj, total_loss, LossBreakdown, LossParts, LossWeights,
};
use crate::prompt::{build_prompts, PromptTable};
use crate::space::{CompositionSpace, Pair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// `false` trains and scores with the soft-prompt branch only.
    pub use_dfm: bool,
    /// Prompt embedding dimension `d`.
    pub prompt_dim: usize,
    /// Joint feature dimension `d_f`.
    pub feature_dim: usize,
    /// Raw input dimension `d_in`.
    pub input_dim: usize,
    /// Prefix length `p`.
    pub prefix_len: usize,
    /// Image tokens `L_v`.
    pub image_tokens: usize,
    /// Fusion blocks `K`.
    pub blocks: usize,
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::T2i,
            use_dfm: true,
            prompt_dim: 16,
            feature_dim: 16,
            input_dim: 16,
            prefix_len: 3,
            image_tokens: 4,
            blocks: 1,
            temperature: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("prompt_dim", self.prompt_dim),
            ("feature_dim", self.feature_dim),
            ("input_dim", self.input_dim),
            ("image_tokens", self.image_tokens),
            ("blocks", self.blocks),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be finite and > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Every trainable array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfspParams<T = Matrix> {
    pub prompt: PromptTable<T>,
    pub fusion: Option<FusionParams<T>>,
}

impl<T> ParamTree<T> for DfspParams<T> {
    type Mapped<U> = DfspParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> DfspParams<U> {
        DfspParams {
            prompt: self.prompt.map_named(&join(prefix, "prompt"), f),
            fusion: self
                .fusion
                .as_ref()
                .map(|p| p.map_named(&join(prefix, "fusion"), f)),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.prompt.visit_mut(&join(prefix, "prompt"), f);
        if let Some(p) = &mut self.fusion {
            p.visit_mut(&join(prefix, "fusion"), f);
        }
    }
}

impl DfspParams {
    /// Copy with leaves replaced, in tree order.
    pub fn with_values(&self, values: &[Matrix]) -> Result<Self> {
        let mut out = self.clone();
        let mut it = values.iter();
        let mut err = None;
        out.visit_mut("", &mut |name, m| match it.next() {
            Some(v) if v.shape() == m.shape() => *m = v.clone(),
            Some(v) => {
                err.get_or_insert_with(|| {
                    Error::shape("with_values", format!("{name} given {:?}", v.shape()))
                });
            }
            None => {
                err.get_or_insert_with(|| {
                    Error::shape("with_values", format!("no value for {name}"))
                });
            }
        });
        if it.next().is_some() {
            err.get_or_insert_with(|| Error::shape("with_values", "too many values"));
        }
        match err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `B x |candidates|`, soft-prompt branch.
    pub spm_logits: Var,
    /// `B x |candidates|`, fusion branch.
    pub dfm_logits: Option<Var>,
    /// `n + m` decomposed rows.
    pub decomposed: Option<Var>,
    pub fused: Option<FusionOutput>,
    pub f_v: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfspModel {
    pub config: ModelConfig,
    pub params: DfspParams,
    pub encoders: Encoders,
}

impl DfspModel {
    /// Encoders, prompts and fusion come from separate streams of `seed`, so
    /// models that differ only in `use_dfm` or `variant` share their towers
    /// and initial prompts.
    pub fn init(config: ModelConfig, space: &CompositionSpace, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoders = Encoders::init(
            config.prompt_dim,
            config.input_dim,
            config.feature_dim,
            config.image_tokens,
            seed,
        )?;
        let prompt = PromptTable::init(
            space,
            config.prompt_dim,
            config.prefix_len,
            seed.wrapping_add(1),
        )?;
        let fusion = if config.use_dfm {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
            Some(FusionParams::init(
                config.variant,
                config.feature_dim,
                config.blocks,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            config,
            params: DfspParams { prompt, fusion },
            encoders,
        })
    }

    /// Copy with `N(0, std^2)` noise added to every trainable entry. Used to
    /// move gradient checks off the identity initialization, where the
    /// recompose hidden layer has an exactly zero gradient.
    pub fn perturbed(&self, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        out.params.visit_mut("", &mut |_, m| {
            let noise = Matrix::random_normal(m.rows(), m.cols(), std, &mut rng);
            m.data_mut()
                .iter_mut()
                .zip(noise.data())
                .for_each(|(v, e)| *v += e);
        });
        out
    }

    /// Checks that the model's tables fit `space`.
    pub fn check_space(&self, space: &CompositionSpace) -> Result<()> {
        let p = &self.params.prompt;
        if p.state_emb.rows() != space.n_states() || p.object_emb.rows() != space.n_objects() {
            return Err(Error::InvalidSpace(format!(
                "model has {} states and {} objects, data has {} and {}",
                p.state_emb.rows(),
                p.object_emb.rows(),
                space.n_states(),
                space.n_objects()
            )));
        }
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        crate::diff::count_params(&self.params)
    }

    /// Trainable count of the fusion branch alone.
    pub fn dfm_param_count(&self) -> usize {
        self.params
            .fusion
            .as_ref()
            .map_or(0, crate::diff::count_params)
    }

    pub fn encode(&self, raw: &Matrix) -> Result<ImageFeatures> {
        encode_image(&self.encoders.image, raw)
    }

    /// Builds the graph for a batch scored against `candidates`. The
    /// decomposition always averages over the seen pairs of `space`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &DfspParams<Var>,
        space: &CompositionSpace,
        images: &ImageFeatures,
        candidates: &[Pair],
    ) -> Result<Forward> {
        if images.is_empty() {
            return Err(Error::shape("forward", "empty batch"));
        }
        if candidates.is_empty() {
            return Err(Error::shape("forward", "no candidate pairs"));
        }
        let cfg = &self.config;
        let seen = space.seen_pairs();
        let seen_prompts = build_prompts(tape, &bound.prompt, seen)?;
        let f_t_seen = encode_text(tape, &self.encoders.text, &seen_prompts)?;
        let f_t = if candidates == seen {
            f_t_seen
        } else {
            let prompts = build_prompts(tape, &bound.prompt, candidates)?;
            encode_text(tape, &self.encoders.text, &prompts)?
        };
        let f_v = tape.constant(images.global.clone())?;
        let spm_logits = dot_scores(tape, f_v, f_t, cfg.temperature)?;

        let mut out = Forward {
            spm_logits,
            dfm_logits: None,
            decomposed: None,
            fused: None,
            f_v,
        };
        if let Some(fusion) = &bound.fusion {
            let (n, m) = (space.n_states(), space.n_objects());
            let f_plus = decompose(tape, f_t_seen, &space.pair_index(), n, m)?;
            let mut tokens = Vec::with_capacity(images.len());
            for t in &images.tokens {
                tokens.push(tape.constant(t.clone())?);
            }
            let fused = fuse(tape, f_plus, &tokens, fusion, cfg.variant)?;
            let logits = pair_scores(
                tape,
                &fused,
                fusion,
                cfg.variant,
                f_t,
                f_v,
                candidates,
                n,
                m,
                cfg.temperature,
            )?;
            out.dfm_logits = Some(logits);
            out.decomposed = Some(f_plus);
            out.fused = Some(fused);
        }
        Ok(out)
    }

    /// Total loss node and the unweighted parts for a labelled batch.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        tape: &mut Tape,
        bound: &DfspParams<Var>,
        space: &CompositionSpace,
        images: &ImageFeatures,
        labels: &[Pair],
        candidates: &[Pair],
        weights: LossWeights,
    ) -> Result<(Var, LossBreakdown)> {
        if labels.len() != images.len() {
            return Err(Error::shape(
                "loss",
                format!("{} labels for {} samples", labels.len(), images.len()),
            ));
        }
        let targets = label_positions(labels, candidates)?;
        let fwd = self.forward(tape, bound, space, images, candidates)?;
        let l_spm = tape.cross_entropy(fwd.spm_logits, &targets)?;
        let value = |tape: &Tape, v: Var| tape.value(v).get(0, 0);

        match (fwd.dfm_logits, fwd.decomposed) {
            (Some(dfm_logits), Some(f_plus)) => {
                let (n, m) = (space.n_states(), space.n_objects());
                let l_dfm = loss_dfm(tape, dfm_logits, &targets)?;
                let f_s = tape.select_rows(f_plus, &(0..n).collect::<Vec<_>>())?;
                let f_o = tape.select_rows(f_plus, &(n..n + m).collect::<Vec<_>>())?;
                let s_labels: Vec<usize> = labels.iter().map(|p| p.0).collect();
                let o_labels: Vec<usize> = labels.iter().map(|p| p.1).collect();
                let l_st = loss_st_obj(
                    tape,
                    fwd.f_v,
                    f_s,
                    f_o,
                    &s_labels,
                    &o_labels,
                    self.config.temperature,
                )?;
                let total = combine_losses(tape, l_dfm, l_st, l_spm, weights)?;
                let parts = LossParts {
                    l_dfm: value(tape, l_dfm),
                    l_st_obj: value(tape, l_st),
                    l_spm: value(tape, l_spm),
                };
                let mut breakdown = total_loss(parts, weights)?;
                // Keep the logged total equal to the optimized node.
                breakdown.total = value(tape, total);
                Ok((total, breakdown))
            }
            _ => {
                let l = value(tape, l_spm);
                if !l.is_finite() {
                    return Err(Error::NonFinite("l_spm".into()));
                }
                Ok((
                    l_spm,
                    LossBreakdown {
                        l_dfm: 0.0,
                        l_st_obj: 0.0,
                        l_spm: l,
                        total: l,
                    },
                ))
            }
        }
    }

    /// Loss value and gradients for every trainable array.
    pub fn loss_and_grad(
        &self,
        space: &CompositionSpace,
        images: &ImageFeatures,
        labels: &[Pair],
        candidates: &[Pair],
        weights: LossWeights,
    ) -> Result<(LossBreakdown, DfspParams)> {
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &self.params)?;
        let (total, breakdown) = self.loss(
            &mut tape, &bound, space, images, labels, candidates, weights,
        )?;
        let grads = tape.backward(total)?;
        Ok((breakdown, bound.map_named("", &mut |_, v| grads.of(*v))))
    }

    /// Inference scores `B x |candidates|`: the fusion branch when present,
    /// otherwise the soft-prompt branch. Processed in chunks of `chunk`.
    pub fn scores(
        &self,
        space: &CompositionSpace,
        images: &ImageFeatures,
        candidates: &[Pair],
        chunk: usize,
    ) -> Result<Matrix> {
        let chunk = chunk.max(1);
        let mut data = Vec::with_capacity(images.len() * candidates.len());
        let mut start = 0;
        while start < images.len() {
            let end = (start + chunk).min(images.len());
            let batch = images.select(&(start..end).collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &self.params)?;
            let fwd = self.forward(&mut tape, &bound, space, &batch, candidates)?;
            let logits = tape.value(fwd.dfm_logits.unwrap_or(fwd.spm_logits));
            if !logits.is_finite() {
                return Err(Error::NonFinite("scores".into()));
            }
            data.extend_from_slice(logits.data());
            start = end;
        }
        Matrix::from_vec(images.len(), candidates.len(), data)
    }

    /// Last-block cross-attention maps for each sample: image-token queries
    /// over decomposed text when image tokens are fused, else text queries
    /// over image tokens.
    pub fn attention_maps(
        &self,
        space: &CompositionSpace,
        images: &ImageFeatures,
    ) -> Result<Vec<Matrix>> {
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &self.params)?;
        let fwd = self.forward(&mut tape, &bound, space, images, space.seen_pairs())?;
        let fused = fwd
            .fused
            .ok_or_else(|| Error::Config("model has no fusion branch".into()))?;
        let maps = fused
            .image_attention
            .or(fused.text_attention)
            .ok_or_else(|| Error::Config("fusion produced no attention".into()))?;
        Ok(maps.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Central-difference check of the total loss against every trainable
    /// array. `corrupt` scales one group's analytic gradient by 1.5, which
    /// must make that group fail.
    #[allow(clippy::too_many_arguments)]
    pub fn grad_check(
        &self,
        space: &CompositionSpace,
        images: &ImageFeatures,
        labels: &[Pair],
        candidates: &[Pair],
        weights: LossWeights,
        step: f64,
        tolerance: f64,
        corrupt: Option<&str>,
    ) -> Result<GradCheckReport> {
        let named = named_matrices(&self.params);
        if let Some(group) = corrupt {
            if !named.iter().any(|(n, _)| n == group) {
                return Err(Error::Config(format!("no parameter group named {group:?}")));
            }
        }
        grad_check(
            |values| {
                let mut model = self.clone();
                model.params = self.params.with_values(values)?;
                let (b, g) = model.loss_and_grad(space, images, labels, candidates, weights)?;
                let grads = named_matrices(&g)
                    .into_iter()
                    .map(|(name, m)| {
                        if Some(name.as_str()) == corrupt {
                            m.scale(1.5)
                        } else {
                            m
                        }
                    })
                    .collect();
                Ok((b.total, grads))
            },
            &named,
            step,
            tolerance,
        )
    }
}

/// Column of each label within `candidates`.
pub fn label_positions(labels: &[Pair], candidates: &[Pair]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|p| {
            candidates
                .iter()
                .position(|c| c == p)
                .ok_or_else(|| Error::InvalidSpace(format!("label pair {p:?} is not a candidate")))
        })
        .collect()
}

/// Argmax per row; ties go to the lowest column.
pub fn argmax_rows(scores: &Matrix) -> Vec<usize> {
    scores
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::World;

    fn space() -> CompositionSpace {
        CompositionSpace::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["x".into(), "y".into(), "z".into()],
            vec![(0, 0), (1, 1), (2, 2), (0, 1), (1, 2)],
            vec![(2, 0), (0, 2)],
            World::Closed,
        )
        .unwrap()
    }

    fn small(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            prompt_dim: 4,
            feature_dim: 4,
            input_dim: 5,
            prefix_len: 2,
            image_tokens: 2,
            temperature: 0.5,
            ..ModelConfig::default()
        }
    }

    fn images(model: &DfspModel, b: usize) -> ImageFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        model
            .encode(&Matrix::random_normal(b, 5, 1.0, &mut rng))
            .unwrap()
    }

    #[test]
    fn spm_only_shares_towers_and_prompts() {
        let sp = space();
        let full = DfspModel::init(small(Variant::T2i), &sp, 3).unwrap();
        let spm = DfspModel::init(
            ModelConfig {
                use_dfm: false,
                ..small(Variant::T2i)
            },
            &sp,
            3,
        )
        .unwrap();
        assert_eq!(full.encoders, spm.encoders);
        assert_eq!(full.params.prompt, spm.params.prompt);
        assert!(spm.params.fusion.is_none());
        assert_eq!(spm.dfm_param_count(), 0);
    }

    #[test]
    fn argmax_ties_pick_lowest_column() {
        let m = Matrix::from_rows(&[[1.0, 3.0, 3.0], [0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(argmax_rows(&m), vec![1, 0]);
    }

    #[test]
    fn loss_breakdown_matches_weighted_sum() {
        let sp = space();
        for v in Variant::ALL {
            let model = DfspModel::init(small(v), &sp, 1).unwrap();
            let imgs = images(&model, 3);
            let labels = [(0, 0), (1, 2), (0, 1)];
            let w = LossWeights {
                alpha: 0.3,
                beta: 0.7,
            };
            let (b, _) = model
                .loss_and_grad(&sp, &imgs, &labels, sp.seen_pairs(), w)
                .unwrap();
            assert!((b.total - (b.l_dfm + 0.3 * b.l_st_obj + 0.7 * b.l_spm)).abs() < 1e-9);
            assert!(b.l_dfm >= 0.0 && b.l_st_obj >= 0.0 && b.l_spm >= 0.0);
        }
    }

    #[test]
    fn label_outside_candidates_rejected() {
        let sp = space();
        let model = DfspModel::init(small(Variant::T2i), &sp, 1).unwrap();
        let imgs = images(&model, 1);
        let r = model.loss_and_grad(
            &sp,
            &imgs,
            &[(2, 0)],
            sp.seen_pairs(),
            LossWeights::default(),
        );
        assert!(matches!(r, Err(Error::InvalidSpace(_))));
    }

    #[test]
    fn scores_are_chunk_invariant() {
        let sp = space();
        let model = DfspModel::init(small(Variant::Bif), &sp, 1).unwrap();
        let imgs = images(&model, 5);
        let a = model.scores(&sp, &imgs, sp.test_pairs(), 2).unwrap();
        let b = model.scores(&sp, &imgs, sp.test_pairs(), 100).unwrap();
        assert_eq!(a.shape(), (5, 7));
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn with_values_round_trip_and_shape_errors() {
        let sp = space();
        let model = DfspModel::init(small(Variant::I2t), &sp, 1).unwrap();
        let vals: Vec<Matrix> = named_matrices(&model.params)
            .into_iter()
            .map(|(_, m)| m)
            .collect();
        assert_eq!(model.params.with_values(&vals).unwrap(), model.params);
        assert!(model.params.with_values(&vals[1..]).is_err());
        let mut bad = vals.clone();
        bad[0] = Matrix::zeros(1, 1);
        assert!(model.params.with_values(&bad).is_err());
    }

    #[test]
    fn attention_maps_shapes() {
        let sp = space();
        let model = DfspModel::init(small(Variant::T2i), &sp, 1).unwrap();
        let imgs = images(&model, 2);
        let maps = model.attention_maps(&sp, &imgs).unwrap();
        assert_eq!(maps.len(), 2);
        assert_eq!(maps[0].shape(), (2, 6));
    }
}
