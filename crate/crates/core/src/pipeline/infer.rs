use ndarray::{Array2, ArrayView2};

use super::data::RegionBatch;
use super::model::StudentModel;
use crate::diversify::{group_score_with_grad, GroupMode};
use crate::embeddings::TeacherSpace;
use crate::error::{shape_err, Error, Result};
use crate::eval::{LabelMap, IGNORE};

/// `M x K` group scores of every query embedding against `classes`.
pub fn class_scores(
    post: ArrayView2<f64>,
    space: &TeacherSpace,
    classes: &[usize],
    mode: GroupMode,
) -> Result<Array2<f64>> {
    if classes.is_empty() {
        return Err(Error::Config(
            "classification needs at least one class".into(),
        ));
    }
    if post.ncols() != space.dim() {
        return Err(shape_err(format!(
            "{}-d queries against {}-d text",
            post.ncols(),
            space.dim()
        )));
    }
    let mut out = Array2::zeros((post.nrows(), classes.len()));
    for (q, row) in post.outer_iter().enumerate() {
        let row = row.to_vec();
        for (col, &c) in classes.iter().enumerate() {
            out[[q, col]] = group_score_with_grad(&row, space.synonyms(c)?, mode, false).0;
        }
    }
    Ok(out)
}

/// Scaled class scores with the no-object logit appended as column `K`.
pub fn class_logits(
    post: ArrayView2<f64>,
    space: &TeacherSpace,
    classes: &[usize],
    mode: GroupMode,
    logit_scale: f64,
    no_object: f64,
) -> Result<Array2<f64>> {
    let s = class_scores(post, space, classes, mode)?;
    let k = classes.len();
    Ok(Array2::from_shape_fn((s.nrows(), k + 1), |(q, c)| {
        if c < k {
            logit_scale * s[[q, c]]
        } else {
            no_object
        }
    }))
}

fn first_argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    values
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
}

/// Pixel labels from soft masks (`M x P`) and non-negative class scores
/// (`M x (K+1)`, last column no-object).
///
/// Each query's class is its best column and its confidence its best score
/// over the `K` real classes. A pixel takes the class of the query
/// maximizing mask times confidence; a query whose best column is
/// no-object yields [`IGNORE`]. Ties go to the lowest query, then the
/// lowest class.
pub fn fuse(
    masks: ArrayView2<f64>,
    scores: ArrayView2<f64>,
    classes: &[usize],
) -> Result<Vec<u16>> {
    let k = classes.len();
    if scores.nrows() != masks.nrows() || scores.ncols() != k + 1 {
        return Err(shape_err(format!(
            "{} masks and a {}x{} score matrix for {k} classes",
            masks.nrows(),
            scores.nrows(),
            scores.ncols()
        )));
    }
    let per_query: Vec<(usize, f64)> = scores
        .outer_iter()
        .map(|row| {
            let (cls, _) = first_argmax(row.iter().copied());
            let (_, conf) = first_argmax(row.iter().take(k).copied());
            (cls, conf)
        })
        .collect();
    Ok((0..masks.ncols())
        .map(|p| {
            let (q, _) = first_argmax((0..masks.nrows()).map(|q| masks[[q, p]] * per_query[q].1));
            let cls = per_query[q].0;
            if cls < k {
                classes[cls] as u16
            } else {
                IGNORE
            }
        })
        .collect())
}

/// Open-vocabulary label map of one image over `classes`, fusing masks
/// with the softmax class probabilities.
pub fn segment_then_classify(
    model: &StudentModel,
    batch: &RegionBatch,
    space: &TeacherSpace,
    classes: &[usize],
    mode: GroupMode,
    logit_scale: f64,
) -> Result<LabelMap> {
    let fwd = model.forward(batch.features.view())?;
    let mut probs = class_logits(
        fwd.post.view(),
        space,
        classes,
        mode,
        logit_scale,
        model.no_object,
    )?;
    for mut row in probs.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|l| (l - max).exp());
        let z = row.sum();
        row /= z;
    }
    let labels = fuse(fwd.masks.view(), probs.view(), classes)?;
    LabelMap::new(batch.height, batch.width, labels)
}

/// Ground-truth label map: instance categories, background ignored.
pub fn gt_label_map(batch: &RegionBatch) -> LabelMap {
    let mut labels = vec![IGNORE; batch.pixels()];
    for (mask, &c) in batch.gt_masks.outer_iter().zip(&batch.gt_labels) {
        for (l, &v) in labels.iter_mut().zip(mask) {
            if v > 0.0 {
                *l = c as u16;
            }
        }
    }
    LabelMap {
        height: batch.height,
        width: batch.width,
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{cosine, CategoryTable, TeacherConfig};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn space() -> TeacherSpace {
        TeacherSpace::build(
            &TeacherConfig {
                dim: 8,
                ..Default::default()
            },
            &CategoryTable::synthetic(3, 3),
            2,
        )
        .unwrap()
    }

    #[test]
    fn canonical_query_scores_one() {
        let s = space();
        let post =
            Array2::from_shape_vec((1, 8), s.canonical(1).unwrap().as_slice().to_vec()).unwrap();
        let sc = class_scores(post.view(), &s, &[0, 1, 2], GroupMode::Canonical).unwrap();
        assert!((sc[[0, 1]] - 1.0).abs() < 1e-12);
        assert_eq!(first_argmax(sc.row(0).iter().copied()).0, 1);
        assert!(class_scores(post.view(), &s, &[], GroupMode::Canonical).is_err());
    }

    #[test]
    fn group_max_dominates_canonical_and_matches_loop() {
        let s = space();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let post = Array2::from_shape_fn((4, 8), |_| rng.gen_range(-1.0..1.0));
        let can = class_scores(post.view(), &s, &[0, 1, 2], GroupMode::Canonical).unwrap();
        let max = class_scores(post.view(), &s, &[0, 1, 2], GroupMode::GroupMax).unwrap();
        for q in 0..4 {
            for c in 0..3 {
                assert!(max[[q, c]] >= can[[q, c]]);
                let row = post.row(q).to_vec();
                let direct = cosine(&row, s.canonical(c).unwrap().as_slice());
                assert!((can[[q, c]] - direct).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn full_mask_confident_query_labels_everything() {
        let masks = Array2::from_elem((1, 6), 1.0);
        let scores = array![[0.05, 0.9, 0.05]];
        assert_eq!(
            fuse(masks.view(), scores.view(), &[3, 7]).unwrap(),
            vec![7; 6]
        );
    }

    #[test]
    fn disjoint_masks_reproduce_regions() {
        let masks = array![
            [1.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 1.0],
            [0.3, 0.3, 0.3, 0.3]
        ];
        let scores = array![[0.8, 0.1, 0.1], [0.1, 0.7, 0.2], [0.0, 0.1, 0.9]];
        assert_eq!(
            fuse(masks.view(), scores.view(), &[0, 1]).unwrap(),
            vec![0, 0, 1, 1]
        );
    }

    #[test]
    fn no_object_winner_gives_ignore() {
        let masks = array![[0.9, 0.1]];
        let scores = array![[0.3, 0.7]];
        assert_eq!(
            fuse(masks.view(), scores.view(), &[0]).unwrap(),
            vec![IGNORE, IGNORE]
        );
    }

    proptest::proptest! {
        #[test]
        fn fusion_invariant_to_positive_rescaling(
            m in proptest::collection::vec(0.0f64..1.0, 12),
            s in proptest::collection::vec(0.0f64..1.0, 12),
            k in 0.01f64..100.0,
        ) {
            let masks = Array2::from_shape_vec((3, 4), m).unwrap();
            let scores = Array2::from_shape_vec((3, 4), s).unwrap();
            let a = fuse(masks.view(), scores.view(), &[0, 1, 2]).unwrap();
            let scaled = scores.mapv(|v| v * k);
            let b = fuse(masks.view(), scaled.view(), &[0, 1, 2]).unwrap();
            proptest::prop_assert_eq!(a, b);
        }
    }
}
