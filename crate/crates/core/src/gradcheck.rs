//! Central finite differences and the gradient suite that checks every
//! analytic gradient in the crate against them.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distill::DistillVariant;
use crate::diversify::{DiversifyStrategy, GroupMode};
use crate::error::Result;
use crate::losses::{
    alignment_ce_with_grad, bce_mask_loss_with_grad, dice_loss_with_grad, grounding_raw,
};
use crate::pipeline::{
    objective, Dataset, ModelDims, StudentModel, TrainConfig, TrainContext, WorldConfig,
};
use crate::rng::derive_seed;

/// Finite-difference step used by the suite.
pub const FD_STEP: f64 = 1e-5;
/// Relative error tolerance for single kernels.
pub const KERNEL_TOL: f64 = 1e-4;
/// Relative error tolerance for the full training objective.
pub const COMPOSITE_TOL: f64 = 1e-3;

/// Central-difference gradient of `f` at `x`: `(f(x + h e_k) - f(x - h e_k)) / 2h`.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let plus = f(&probe);
            probe[k] = x[k] - h;
            let minus = f(&probe);
            probe[k] = x[k];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)` over whole vectors (Euclidean norms).
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Outcome of one gradient check over many random points.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub points: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.points > 0 && self.max_rel_error <= self.tolerance
    }
}

fn check<F>(
    name: &'static str,
    points: usize,
    tolerance: f64,
    seed: u64,
    mut point: F,
) -> Result<CheckReport>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<f64>,
{
    let mut max_rel_error = 0.0f64;
    for i in 0..points {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
        max_rel_error = max_rel_error.max(point(&mut rng)?);
    }
    Ok(CheckReport {
        name,
        points,
        max_rel_error,
        tolerance,
    })
}

fn uniform_vecs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

fn flat(v: &[Vec<f64>]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

// Pairwise KD losses have kinks where a distance matches its target or a
// student sits on a region; points closer than this to either are redrawn.
const KINK_MARGIN: f64 = 1e-3;

fn non_degenerate_kd(student: &[Vec<f64>], regions: &[Vec<f64>], text: &[Vec<f64>]) -> bool {
    use crate::embeddings::smoothed_distance;
    student.iter().enumerate().all(|(i, s)| {
        regions.iter().enumerate().all(|(j, r)| {
            let d = smoothed_distance(s, r);
            d > KINK_MARGIN
                && (d - smoothed_distance(&text[i], &text[j])).abs() > KINK_MARGIN
                && (d - smoothed_distance(&regions[i], r)).abs() > KINK_MARGIN
        })
    })
}

fn distill_point(variant: DistillVariant, rng: &mut ChaCha8Rng) -> f64 {
    let (student, regions, text) = loop {
        let n = rng.gen_range(1..=6);
        let d = rng.gen_range(2..=16);
        let s = uniform_vecs(rng, n, d);
        let r = uniform_vecs(rng, n, d);
        let t = uniform_vecs(rng, n, d);
        if non_degenerate_kd(&s, &r, &t) {
            break (s, r, t);
        }
    };
    let d = student[0].len();
    let (_, g) = variant.loss_and_grad_raw(&student, &regions, &text);
    let fd = central_difference(
        |x| {
            let probe: Vec<&[f64]> = x.chunks(d).collect();
            variant.loss_raw(&probe, &regions, &text)
        },
        &flat(&student),
        FD_STEP,
    );
    relative_error(&flat(&g), &fd, 1e-8)
}

fn random_mask(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let n = rng.gen_range(4..=64);
    let pred = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
    let gt = (0..n)
        .map(|_| f64::from(u8::from(rng.gen_bool(0.5))))
        .collect();
    (pred, gt)
}

fn mask_point(
    rng: &mut ChaCha8Rng,
    f: fn(&[f64], &[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<f64> {
    let (pred, gt) = random_mask(rng);
    let (_, g) = f(&pred, &gt)?;
    let fd = central_difference(
        |x| f(x, &gt).map(|(l, _)| l).unwrap_or(f64::NAN),
        &pred,
        FD_STEP,
    );
    Ok(relative_error(&g, &fd, 1e-8))
}

fn alignment_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let m = rng.gen_range(1..=6);
    let k = rng.gen_range(2..=8);
    let values: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..k)).collect();
    let logits = Array2::from_shape_vec((m, k), values.clone()).expect("m*k values");
    let (_, g) = alignment_ce_with_grad(logits.view(), &labels)?;
    let fd = central_difference(
        |x| {
            let l = Array2::from_shape_vec((m, k), x.to_vec()).expect("m*k values");
            alignment_ce_with_grad(l.view(), &labels)
                .map(|(v, _)| v)
                .unwrap_or(f64::NAN)
        },
        &values,
        FD_STEP,
    );
    Ok(relative_error(
        g.as_slice().expect("standard layout"),
        &fd,
        1e-8,
    ))
}

// Word-to-region argmax ties make the grounding loss non-smooth; points
// whose best and second-best cosines are closer than this are redrawn.
const ARGMAX_MARGIN: f64 = 1e-3;

fn grounding_non_degenerate(regions: &[Vec<Vec<f64>>], words: &[Vec<Vec<f64>>]) -> bool {
    use crate::embeddings::cosine;
    regions.iter().all(|rs| {
        words.iter().flatten().all(|w| {
            let mut c: Vec<f64> = rs.iter().map(|r| cosine(r, w)).collect();
            c.sort_by(|a, b| b.total_cmp(a));
            c.len() < 2 || c[0] - c[1] > ARGMAX_MARGIN
        })
    })
}

fn grounding_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (regions, words) = loop {
        let b = rng.gen_range(2..=4);
        let d = rng.gen_range(4..=16);
        let regions: Vec<Vec<Vec<f64>>> = (0..b)
            .map(|_| {
                let n = rng.gen_range(1..=4);
                uniform_vecs(rng, n, d)
            })
            .collect();
        let words: Vec<Vec<Vec<f64>>> = (0..b)
            .map(|_| {
                let n = rng.gen_range(1..=3);
                uniform_vecs(rng, n, d)
            })
            .collect();
        if grounding_non_degenerate(&regions, &words) {
            break (regions, words);
        }
    };
    let d = words[0][0].len();
    let sizes: Vec<usize> = regions.iter().map(Vec::len).collect();
    let (_, g) = grounding_raw(&regions, &words, 10.0, true)?;
    let analytic: Vec<f64> = g.iter().flat_map(|img| flat(img)).collect();
    let x0: Vec<f64> = regions.iter().flat_map(|img| flat(img)).collect();
    let fd = central_difference(
        |x| {
            let mut rest = x;
            let probe: Vec<Vec<&[f64]>> = sizes
                .iter()
                .map(|&n| {
                    let (head, tail) = rest.split_at(n * d);
                    rest = tail;
                    head.chunks(d).collect()
                })
                .collect();
            grounding_raw(&probe, &words, 10.0, false)
                .map(|(l, _)| l)
                .unwrap_or(f64::NAN)
        },
        &x0,
        FD_STEP,
    );
    Ok(relative_error(&analytic, &fd, 1e-8))
}

/// Smallest world the trainer accepts: 6x6 images, `D = 4`.
pub fn tiny_world(seed: u64) -> Result<Dataset> {
    let mut cfg = WorldConfig {
        categories: 4,
        synonyms: 3,
        unseen: vec![3],
        height: 6,
        width: 6,
        train_images: 2,
        val_images: 1,
        max_instances: 2,
        ..Default::default()
    };
    cfg.teacher.dim = 4;
    Dataset::generate(&cfg, seed)
}

fn composite_point(ds: &Dataset, seen: &[usize], rng: &mut ChaCha8Rng) -> Result<f64> {
    let dims = ModelDims {
        queries: 2,
        query_dim: 4,
        text_dim: 4,
        feature_dim: ds.config.feature_dim(),
    };
    let model = StudentModel::init(dims, rng.gen())?;
    let modes = [
        GroupMode::Canonical,
        GroupMode::GroupAvg,
        GroupMode::GroupMax,
    ];
    let cfg = TrainConfig {
        mode: modes[rng.gen_range(0..modes.len())],
        diversify: DiversifyStrategy::Random,
        distill: DistillVariant::TextGuided,
        ..Default::default()
    };
    let ctx = TrainContext {
        table: &ds.table,
        space: &ds.space,
        vocab: seen,
    };
    let (seed, step) = (rng.gen(), rng.gen_range(0..cfg.steps));
    let (_, g) = objective(&model, &ds.train, &ctx, &cfg, seed, step, true)?;
    let analytic = g.expect("requested").to_flat();
    let fd = central_difference(
        |x| {
            StudentModel::from_flat(dims, x)
                .and_then(|m| objective(&m, &ds.train, &ctx, &cfg, seed, step, false))
                .map(|(b, _)| b.total)
                .unwrap_or(f64::NAN)
        },
        &model.to_flat(),
        FD_STEP,
    );
    Ok(relative_error(&analytic, &fd, 1e-8))
}

/// Checks every analytic gradient at `points` random points each: the three
/// distillation losses, both mask losses, the alignment cross-entropy, the
/// grounding loss and the full training objective on a tiny model.
pub fn gradient_suite(points: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for (i, (name, variant)) in [
        ("vanilla_kd", DistillVariant::Vanilla),
        ("vision_guided_kd", DistillVariant::VisionGuided),
        ("tgkd", DistillVariant::TextGuided),
    ]
    .into_iter()
    .enumerate()
    {
        out.push(check(
            name,
            points,
            KERNEL_TOL,
            derive_seed(seed, &[1, i as u64]),
            |rng| Ok(distill_point(variant, rng)),
        )?);
    }
    out.push(check(
        "bce_mask_loss",
        points,
        KERNEL_TOL,
        derive_seed(seed, &[2]),
        |rng| mask_point(rng, bce_mask_loss_with_grad),
    )?);
    out.push(check(
        "dice_loss",
        points,
        KERNEL_TOL,
        derive_seed(seed, &[3]),
        |rng| mask_point(rng, dice_loss_with_grad),
    )?);
    out.push(check(
        "alignment_ce",
        points,
        KERNEL_TOL,
        derive_seed(seed, &[4]),
        alignment_point,
    )?);
    out.push(check(
        "grounding_loss",
        points,
        KERNEL_TOL,
        derive_seed(seed, &[5]),
        grounding_point,
    )?);
    let ds = tiny_world(derive_seed(seed, &[6]))?;
    let seen = ds.config.seen();
    out.push(check(
        "composite",
        points,
        COMPOSITE_TOL,
        derive_seed(seed, &[7]),
        |rng| composite_point(&ds, &seen, rng),
    )?);
    Ok(out)
}
