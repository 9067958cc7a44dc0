use ndarray::{Array2, ArrayView1};

use super::data::RegionBatch;
use super::model::{Forward, ModelGrad, StudentModel};
use crate::distill::{unit, unit_backward, DistillVariant};
use crate::diversify::{group_score_with_grad, training_words, DiversifyStrategy, GroupMode};
use crate::embeddings::{
    cosine_with_grad, smoothed_distance, CategoryTable, Embedding, TeacherSpace,
};
use crate::error::{shape_err, Error, Result};
use crate::losses::{
    alignment_ce_with_grad, bce_mask_loss_with_grad, dice_loss_with_grad, grounding_raw,
    hungarian_match, total_loss, LossBreakdown, LossTerms, LossWeights, MatchResult,
    DEFAULT_LOGIT_SCALE,
};
use crate::rng;

/// Learning-rate schedule over the configured number of steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// `lr * (1 - step / steps)^0.9`.
    #[default]
    Poly,
}

impl LrSchedule {
    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Poly => "poly",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [LrSchedule::Constant, LrSchedule::Poly]
            .into_iter()
            .find(|v| v.name() == s)
    }
}

/// Optimization and objective settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub weights: LossWeights,
    pub diversify: DiversifyStrategy,
    pub distill: DistillVariant,
    pub mode: GroupMode,
    /// Scale applied to cosine scores before the classification softmax.
    pub logit_scale: f64,
    /// Scale applied to image-caption scores in the grounding loss.
    pub grounding_scale: f64,
    /// Softmax temperature of the synonym scores.
    pub temperature: f64,
    /// Unit-normalize student embeddings before distillation distances.
    pub normalize_student: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            learning_rate: 0.2,
            schedule: LrSchedule::Poly,
            weights: LossWeights::default(),
            diversify: DiversifyStrategy::Random,
            distill: DistillVariant::TextGuided,
            mode: GroupMode::Canonical,
            logit_scale: DEFAULT_LOGIT_SCALE,
            grounding_scale: 10.0,
            temperature: 1.0,
            normalize_student: false,
        }
    }
}

impl TrainConfig {
    /// Learning rate used at `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Poly => {
                let frac = step as f64 / self.steps.max(1) as f64;
                self.learning_rate * (1.0 - frac).max(0.0).powf(0.9)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [
            ("logit_scale", self.logit_scale),
            ("grounding_scale", self.grounding_scale),
            ("temperature", self.temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Fixed inputs shared by every training step.
#[derive(Clone, Copy, Debug)]
pub struct TrainContext<'a> {
    pub table: &'a CategoryTable,
    pub space: &'a TeacherSpace,
    /// Category ids the classifier is trained over, in column order.
    pub vocab: &'a [usize],
}

impl TrainContext<'_> {
    fn column(&self, category: usize) -> Result<usize> {
        self.vocab
            .iter()
            .position(|&c| c == category)
            .ok_or(Error::UnknownCategory(category))
    }
}

/// Class scores of every query over the vocabulary, with gradients of each
/// score in the query's post-projection embedding when requested.
struct Scores {
    values: Array2<f64>,
    grads: Vec<Vec<Vec<f64>>>,
}

fn score_queries(
    post: &Array2<f64>,
    ctx: &TrainContext<'_>,
    mode: GroupMode,
    want_grad: bool,
) -> Result<Scores> {
    let m = post.nrows();
    let mut values = Array2::zeros((m, ctx.vocab.len()));
    let mut grads = Vec::with_capacity(if want_grad { m } else { 0 });
    for q in 0..m {
        let row = post.row(q).to_vec();
        let mut gq = Vec::new();
        for (col, &c) in ctx.vocab.iter().enumerate() {
            let (s, g) = group_score_with_grad(&row, ctx.space.synonyms(c)?, mode, want_grad);
            values[[q, col]] = s;
            gq.push(g);
        }
        if want_grad {
            grads.push(gq);
        }
    }
    Ok(Scores { values, grads })
}

fn logits_of(scores: &Array2<f64>, scale: f64, no_object: f64) -> Array2<f64> {
    let (m, v) = scores.dim();
    Array2::from_shape_fn((m, v + 1), |(q, c)| {
        if c < v {
            scale * scores[[q, c]]
        } else {
            no_object
        }
    })
}

fn softmax_row(row: ArrayView1<f64>) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Matching cost `w_ce * (-p_q(Y_i)) + w_mask * (bce + dice)(mask_q, M_i)`.
fn match_image(
    fwd: &Forward,
    logits: &Array2<f64>,
    batch: &RegionBatch,
    ctx: &TrainContext<'_>,
    weights: &LossWeights,
) -> Result<MatchResult> {
    let m = fwd.masks.nrows();
    let probs: Vec<Vec<f64>> = logits.rows().into_iter().map(softmax_row).collect();
    let mut cost = Array2::zeros((batch.len(), m));
    for (i, &label) in batch.gt_labels.iter().enumerate() {
        let col = ctx.column(label)?;
        let gt = batch.gt_masks.row(i).to_vec();
        for q in 0..m {
            let pred = fwd.masks.row(q).to_vec();
            let (bce, _) = bce_mask_loss_with_grad(&pred, &gt)?;
            let (dice, _) = dice_loss_with_grad(&pred, &gt)?;
            cost[[i, q]] = -weights.ce * probs[q][col] + weights.mask * (bce + dice);
        }
    }
    hungarian_match(cost.view())
}

struct ImageState {
    fwd: Forward,
    d_masks: Array2<f64>,
    d_prior: Array2<f64>,
    d_post: Array2<f64>,
    matched: Vec<usize>,
}

/// Value of the composite objective over `batches` at training step `step`
/// and, when `want_grad` is set, its gradient in every model parameter.
///
/// Mask, classification and distillation terms are averaged over images;
/// the grounding term contrasts all images of the batch.
pub fn objective(
    model: &StudentModel,
    batches: &[RegionBatch],
    ctx: &TrainContext<'_>,
    cfg: &TrainConfig,
    seed: u64,
    step: usize,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<ModelGrad>)> {
    if batches.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let dims = model.dims();
    if cfg.distill != DistillVariant::None && dims.query_dim != ctx.space.dim() {
        return Err(shape_err(format!(
            "distillation compares {}-d queries with {}-d teacher regions",
            dims.query_dim,
            ctx.space.dim()
        )));
    }
    let w = cfg.weights;
    let bf = batches.len() as f64;
    let step_seed = rng::derive_seed(seed, &[step as u64]);
    let mut terms = LossTerms::default();
    let mut d_no_object = 0.0;
    let mut states = Vec::with_capacity(batches.len());
    let mut ground_regions: Vec<Vec<Vec<f64>>> = Vec::with_capacity(batches.len());
    let mut ground_words: Vec<Vec<Embedding>> = Vec::with_capacity(batches.len());

    for batch in batches {
        let fwd = model.forward(batch.features.view())?;
        if fwd
            .masks
            .iter()
            .chain(fwd.post.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Divergence {
                step,
                detail: format!("non-finite activations on image {}", batch.image_id),
            });
        }
        let words = training_words(
            batch,
            ctx.table,
            cfg.diversify,
            step_seed,
            ctx.space,
            cfg.temperature,
        )?;
        let mut scores = score_queries(&fwd.post, ctx, cfg.mode, want_grad)?;
        let matching = match_image(
            &fwd,
            &logits_of(&scores.values, cfg.logit_scale, model.no_object),
            batch,
            ctx,
            &w,
        )?;
        let matched = matching.assignment;
        let m = dims.queries;
        let v = ctx.vocab.len();

        // diversified words replace the target class embedding
        for (i, &q) in matched.iter().enumerate() {
            let entry = ctx.table.get(batch.gt_labels[i])?;
            if words[i] != entry.canonical {
                let col = ctx.column(entry.id)?;
                let text = ctx.space.text(&words[i]).ok_or_else(|| {
                    Error::Domain(format!("word {:?} has no embedding", words[i]))
                })?;
                let (s, g) = cosine_with_grad(
                    fwd.post.row(q).as_slice().expect("standard layout"),
                    text.as_slice(),
                );
                scores.values[[q, col]] = s;
                if want_grad {
                    scores.grads[q][col] = g;
                }
            }
        }

        let logits = logits_of(&scores.values, cfg.logit_scale, model.no_object);
        let mut labels = vec![v; m];
        for (i, &q) in matched.iter().enumerate() {
            labels[q] = ctx.column(batch.gt_labels[i])?;
        }
        let (ce, d_logits) = alignment_ce_with_grad(logits.view(), &labels)?;
        terms.ce += ce / bf;

        let mut d_masks = Array2::zeros(fwd.masks.dim());
        let mut d_post = Array2::zeros(fwd.post.dim());
        let mut d_prior = Array2::zeros(fwd.prior.dim());
        let n = matched.len() as f64;
        let mut mask_loss = 0.0;
        for (i, &q) in matched.iter().enumerate() {
            let pred = fwd.masks.row(q).to_vec();
            let gt = batch.gt_masks.row(i).to_vec();
            let (bce, gb) = bce_mask_loss_with_grad(&pred, &gt)?;
            let (dice, gd) = dice_loss_with_grad(&pred, &gt)?;
            mask_loss += (bce + dice) / n;
            if want_grad {
                let k = w.mask / (n * bf);
                for (p, dm) in d_masks.row_mut(q).iter_mut().enumerate() {
                    *dm = k * (gb[p] + gd[p]);
                }
            }
        }
        terms.mask += mask_loss / bf;

        if want_grad {
            let k = w.ce / bf;
            for q in 0..m {
                for col in 0..v {
                    let dl = k * cfg.logit_scale * d_logits[[q, col]];
                    for (dp, g) in d_post.row_mut(q).iter_mut().zip(&scores.grads[q][col]) {
                        *dp += dl * g;
                    }
                }
                d_no_object += k * d_logits[[q, v]];
            }
        }

        if cfg.distill != DistillVariant::None {
            let raw: Vec<Vec<f64>> = matched.iter().map(|&q| fwd.prior.row(q).to_vec()).collect();
            let student: Vec<Vec<f64>> = if cfg.normalize_student {
                raw.iter().map(|v| unit(v)).collect()
            } else {
                raw.clone()
            };
            let regions = batch
                .instances
                .iter()
                .map(|inst| ctx.space.region(inst))
                .collect::<Result<Vec<_>>>()?;
            let texts: Vec<&[f64]> = batch
                .gt_labels
                .iter()
                .map(|&c| ctx.space.canonical(c).map(|e| e.as_slice()))
                .collect::<Result<_>>()?;
            let (kd, g) = if want_grad {
                cfg.distill.loss_and_grad_raw(&student, &regions, &texts)
            } else {
                (cfg.distill.loss_raw(&student, &regions, &texts), Vec::new())
            };
            terms.kd += kd / bf;
            for ((gi, &q), v) in g.iter().zip(&matched).zip(&raw) {
                let gi = if cfg.normalize_student {
                    unit_backward(v, gi)
                } else {
                    gi.clone()
                };
                for (dp, x) in d_prior.row_mut(q).iter_mut().zip(&gi) {
                    *dp += w.kd / bf * x;
                }
            }
        }

        ground_regions.push(matched.iter().map(|&q| fwd.post.row(q).to_vec()).collect());
        ground_words.push(
            batch
                .caption_words
                .iter()
                .map(|wd| {
                    ctx.space
                        .text(wd)
                        .cloned()
                        .ok_or_else(|| Error::Domain(format!("word {wd:?} has no embedding")))
                })
                .collect::<Result<_>>()?,
        );
        states.push(ImageState {
            fwd,
            d_masks,
            d_prior,
            d_post,
            matched,
        });
    }

    let (ground, ground_grads) = grounding_raw(
        &ground_regions,
        &ground_words,
        cfg.grounding_scale,
        want_grad,
    )?;
    terms.grounding = ground;
    let breakdown = total_loss(terms, &w);
    if !want_grad {
        return Ok((breakdown, None));
    }
    let mut grad = ModelGrad::zeros(dims);
    grad.no_object = d_no_object;
    for ((state, batch), gg) in states.iter_mut().zip(batches).zip(&ground_grads) {
        for (g, &q) in gg.iter().zip(&state.matched) {
            for (dp, x) in state.d_post.row_mut(q).iter_mut().zip(g) {
                *dp += w.grounding * x;
            }
        }
        model.backward(
            batch.features.view(),
            &state.fwd,
            &state.d_masks,
            &state.d_prior,
            &state.d_post,
            &mut grad,
        );
    }
    Ok((breakdown, Some(grad)))
}

/// One full-batch gradient-descent step at the scheduled learning rate.
/// Returns the updated model and the
/// loss breakdown at the model it started from.
pub fn train_step(
    model: &StudentModel,
    batches: &[RegionBatch],
    ctx: &TrainContext<'_>,
    cfg: &TrainConfig,
    seed: u64,
    step: usize,
) -> Result<(StudentModel, LossBreakdown)> {
    let (breakdown, grad) = objective(model, batches, ctx, cfg, seed, step, true)?;
    let grad = grad.expect("requested");
    if !breakdown.is_finite() || !grad.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: format!("non-finite loss or gradient (total {})", breakdown.total),
        });
    }
    let mut next = model.clone();
    next.apply(&grad, cfg.lr_at(step));
    Ok((next, breakdown))
}

/// Frobenius norm, over all training images, of the difference between the
/// student-to-teacher cross-distance matrix `d(V_i, R_j)` and the canonical
/// text distance matrix `d(T(Y_i), T(Y_j))`, with `V` the matched prior
/// queries.
pub fn calibration_gap(
    model: &StudentModel,
    batches: &[RegionBatch],
    ctx: &TrainContext<'_>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut sq = 0.0;
    for batch in batches {
        let fwd = model.forward(batch.features.view())?;
        let scores = score_queries(&fwd.post, ctx, cfg.mode, false)?;
        let logits = logits_of(&scores.values, cfg.logit_scale, model.no_object);
        let matched = match_image(&fwd, &logits, batch, ctx, &cfg.weights)?.assignment;
        let regions = batch
            .instances
            .iter()
            .map(|inst| ctx.space.region(inst))
            .collect::<Result<Vec<_>>>()?;
        let texts = batch
            .gt_labels
            .iter()
            .map(|&c| ctx.space.canonical(c))
            .collect::<Result<Vec<_>>>()?;
        for (i, &q) in matched.iter().enumerate() {
            let mut v = fwd.prior.row(q).to_vec();
            if cfg.normalize_student {
                v = unit(&v);
            }
            for j in 0..matched.len() {
                let diff = smoothed_distance(&v, regions[j].as_slice())
                    - smoothed_distance(texts[i].as_slice(), texts[j].as_slice());
                sq += diff * diff;
            }
        }
    }
    Ok(sq.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use crate::pipeline::{Dataset, ModelDims, WorldConfig};

    fn tiny_world() -> (Dataset, Vec<usize>) {
        let mut cfg = WorldConfig {
            categories: 4,
            synonyms: 3,
            unseen: vec![3],
            height: 6,
            width: 6,
            train_images: 3,
            val_images: 1,
            max_instances: 2,
            ..Default::default()
        };
        cfg.teacher.dim = 4;
        let ds = Dataset::generate(&cfg, 11).unwrap();
        let seen = cfg.seen();
        (ds, seen)
    }

    fn tiny_model(ds: &Dataset, seed: u64) -> StudentModel {
        let dims = ModelDims {
            queries: 3,
            query_dim: 4,
            text_dim: 4,
            feature_dim: ds.config.feature_dim(),
        };
        StudentModel::init(dims, seed).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_model() {
        let (ds, seen) = tiny_world();
        let ctx = TrainContext {
            table: &ds.table,
            space: &ds.space,
            vocab: &seen,
        };
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        let model = tiny_model(&ds, 1);
        let (next, br) = train_step(&model, &ds.train, &ctx, &cfg, 1, 0).unwrap();
        assert_eq!(next, model);
        assert!(br.total > 0.0);
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let (ds, seen) = tiny_world();
        let ctx = TrainContext {
            table: &ds.table,
            space: &ds.space,
            vocab: &seen,
        };
        let zero = LossWeights {
            mask: 0.0,
            ce: 0.0,
            grounding: 0.0,
            kd: 0.0,
        };
        let cfg = TrainConfig {
            weights: zero,
            ..Default::default()
        };
        let model = tiny_model(&ds, 2);
        let (next, br) = train_step(&model, &ds.train, &ctx, &cfg, 1, 0).unwrap();
        assert_eq!(next, model);
        assert_eq!(br.total, 0.0);
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let (ds, seen) = tiny_world();
        let ctx = TrainContext {
            table: &ds.table,
            space: &ds.space,
            vocab: &seen,
        };
        for (k, (mode, normalize_student)) in [
            (GroupMode::Canonical, false),
            (GroupMode::GroupAvg, false),
            (GroupMode::Canonical, true),
        ]
        .into_iter()
        .enumerate()
        {
            let cfg = TrainConfig {
                mode,
                normalize_student,
                ..Default::default()
            };
            let model = tiny_model(&ds, 3 + k as u64);
            let (_, g) = objective(&model, &ds.train, &ctx, &cfg, 5, 0, true).unwrap();
            let dims = model.dims();
            let fd = central_difference(
                |x| {
                    let m = StudentModel::from_flat(dims, x).unwrap();
                    objective(&m, &ds.train, &ctx, &cfg, 5, 0, false)
                        .unwrap()
                        .0
                        .total
                },
                &model.to_flat(),
                1e-5,
            );
            assert!(relative_error(&g.unwrap().to_flat(), &fd, 1e-8) <= 1e-3);
        }
    }

    #[test]
    fn small_step_decreases_loss() {
        let (ds, seen) = tiny_world();
        let ctx = TrainContext {
            table: &ds.table,
            space: &ds.space,
            vocab: &seen,
        };
        let model = tiny_model(&ds, 4);
        for lr in [1e-3, 1e-4] {
            let cfg = TrainConfig {
                learning_rate: lr,
                diversify: DiversifyStrategy::None,
                ..Default::default()
            };
            let (next, before) = train_step(&model, &ds.train, &ctx, &cfg, 1, 0).unwrap();
            let (after, _) = objective(&next, &ds.train, &ctx, &cfg, 1, 0, false).unwrap();
            assert!(
                after.total < before.total,
                "{lr}: {} -> {}",
                before.total,
                after.total
            );
        }
    }

    #[test]
    fn distillation_needs_matching_widths() {
        let (ds, seen) = tiny_world();
        let ctx = TrainContext {
            table: &ds.table,
            space: &ds.space,
            vocab: &seen,
        };
        let dims = ModelDims {
            queries: 3,
            query_dim: 5,
            text_dim: 4,
            feature_dim: ds.config.feature_dim(),
        };
        let model = StudentModel::init(dims, 1).unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(
            objective(&model, &ds.train, &ctx, &cfg, 1, 0, false),
            Err(Error::Shape(_))
        ));
        let cfg = TrainConfig {
            distill: DistillVariant::None,
            ..cfg
        };
        assert!(objective(&model, &ds.train, &ctx, &cfg, 1, 0, false).is_ok());
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let (ds, seen) = tiny_world();
        let ctx = TrainContext {
            table: &ds.table,
            space: &ds.space,
            vocab: &seen,
        };
        let cfg = TrainConfig {
            learning_rate: 1e300,
            ..Default::default()
        };
        let mut model = tiny_model(&ds, 6);
        let mut failed = false;
        for step in 0..5 {
            match train_step(&model, &ds.train, &ctx, &cfg, 1, step) {
                Ok((next, _)) => model = next,
                Err(Error::Divergence { .. }) => {
                    failed = true;
                    break;
                }
                Err(e) => panic!("unexpected error {e}"),
            }
        }
        assert!(failed);
    }
}
