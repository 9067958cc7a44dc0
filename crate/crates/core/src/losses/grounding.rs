//! Batch-contrastive grounding between image regions and caption words.
//!
//! The score of image `a` against caption `b` is the mean, over the words of
//! `b`, of the best cosine similarity any region of `a` reaches for that
//! word. The loss is the symmetric InfoNCE over the `B x B` score matrix with
//! the matched pairs on the diagonal.

use ndarray::{Array2, ArrayView2};

use crate::embeddings::{cosine, cosine_with_grad, Embedding};
use crate::error::{Error, Result};

/// Symmetric InfoNCE on a square score matrix. Returns the loss and its
/// gradient with respect to the scores.
pub fn symmetric_infonce(scores: ArrayView2<f64>, logit_scale: f64) -> Result<(f64, Array2<f64>)> {
    let (b, b2) = scores.dim();
    if b != b2 || b == 0 {
        return Err(Error::Shape(format!(
            "score matrix must be square and nonempty, got {b}x{b2}"
        )));
    }
    let bf = b as f64;
    let z = scores.mapv(|s| s * logit_scale);
    let mut dz = Array2::<f64>::zeros((b, b));
    let mut loss = 0.0;
    // image -> caption (rows), caption -> image (columns)
    for axis in 0..2 {
        for a in 0..b {
            let lane: Vec<f64> = (0..b)
                .map(|k| if axis == 0 { z[[a, k]] } else { z[[k, a]] })
                .collect();
            let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_z = max + lane.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += 0.5 * (log_z - lane[a]) / bf;
            for k in 0..b {
                let p = (lane[k] - log_z).exp();
                let d = 0.5 * (p - f64::from(u8::from(k == a))) / bf;
                if axis == 0 {
                    dz[[a, k]] += d;
                } else {
                    dz[[k, a]] += d;
                }
            }
        }
    }
    Ok((loss, dz.mapv(|g| g * logit_scale)))
}

fn validate<R: AsRef<[f64]>, W: AsRef<[f64]>>(regions: &[Vec<R>], words: &[Vec<W>]) -> Result<()> {
    if regions.len() != words.len() {
        return Err(Error::Shape(format!(
            "{} region lists but {} captions",
            regions.len(),
            words.len()
        )));
    }
    if regions.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if regions.iter().any(Vec::is_empty) || words.iter().any(Vec::is_empty) {
        return Err(Error::Domain(
            "every image needs a region and a caption word".into(),
        ));
    }
    Ok(())
}

/// Grounding loss for a batch of images.
pub fn grounding_loss(
    regions: &[Vec<Embedding>],
    words: &[Vec<Embedding>],
    logit_scale: f64,
) -> Result<f64> {
    grounding_raw(regions, words, logit_scale, false).map(|(l, _)| l)
}

/// Grounding loss and its gradient with respect to every region embedding.
pub fn grounding_loss_with_grad(
    regions: &[Vec<Embedding>],
    words: &[Vec<Embedding>],
    logit_scale: f64,
) -> Result<(f64, Vec<Vec<Vec<f64>>>)> {
    grounding_raw(regions, words, logit_scale, true)
}

pub(crate) fn grounding_raw<R, W>(
    regions: &[Vec<R>],
    words: &[Vec<W>],
    logit_scale: f64,
    want_grad: bool,
) -> Result<(f64, Vec<Vec<Vec<f64>>>)>
where
    R: AsRef<[f64]>,
    W: AsRef<[f64]>,
{
    validate(regions, words)?;
    let b = regions.len();
    // best[a][b][w] = index of the region of image a that best matches word w of caption b
    let mut best = vec![vec![Vec::new(); b]; b];
    let mut scores = Array2::<f64>::zeros((b, b));
    for a in 0..b {
        for c in 0..b {
            let mut total = 0.0;
            for w in &words[c] {
                let (arg, val) = regions[a]
                    .iter()
                    .enumerate()
                    .map(|(r, e)| (r, cosine(e.as_ref(), w.as_ref())))
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, x| if x.1 > acc.1 { x } else { acc },
                    );
                total += val;
                best[a][c].push(arg);
            }
            scores[[a, c]] = total / words[c].len() as f64;
        }
    }
    let (loss, dscores) = symmetric_infonce(scores.view(), logit_scale)?;
    if !want_grad {
        return Ok((loss, Vec::new()));
    }
    let mut grads: Vec<Vec<Vec<f64>>> = regions
        .iter()
        .map(|rs| rs.iter().map(|r| vec![0.0; r.as_ref().len()]).collect())
        .collect();
    for a in 0..b {
        for c in 0..b {
            let ds = dscores[[a, c]] / words[c].len() as f64;
            for (w, &r) in words[c].iter().zip(&best[a][c]) {
                let (_, g) = cosine_with_grad(regions[a][r].as_ref(), w.as_ref());
                for (acc, gk) in grads[a][r].iter_mut().zip(g) {
                    *acc += ds * gk;
                }
            }
        }
    }
    Ok((loss, grads))
}
