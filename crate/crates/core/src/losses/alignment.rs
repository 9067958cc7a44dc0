use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Logit scale applied to cosine scores before the softmax (temperature 0.01).
pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;

/// Mean softmax cross-entropy over the rows of `logits` (`M x (K+1)`, last
/// column is no-object) against per-row targets in `0..=K`.
pub fn alignment_ce(logits: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    alignment_ce_with_grad(logits, labels).map(|(l, _)| l)
}

pub fn alignment_ce_with_grad(
    logits: ArrayView2<f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>)> {
    let (m, k) = logits.dim();
    if labels.len() != m {
        return Err(Error::Shape(format!(
            "{m} score rows but {} labels",
            labels.len()
        )));
    }
    if m == 0 {
        return Err(Error::EmptyBatch);
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Domain(format!("label {bad} outside 0..{k}")));
    }
    let mut grad = Array2::zeros((m, k));
    let mut loss = 0.0;
    for (q, row) in logits.outer_iter().enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|l| (l - max).exp()).sum();
        let log_z = max + z.ln();
        loss += log_z - row[labels[q]];
        for c in 0..k {
            let p = (row[c] - log_z).exp();
            grad[[q, c]] = (p - f64::from(u8::from(c == labels[q]))) / m as f64;
        }
    }
    Ok((loss / m as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn confident_and_uniform_rows() {
        let l = array![[60.0, 0.0, -10.0]];
        assert!(alignment_ce(l.view(), &[0]).unwrap() < 1e-20);
        let u = Array2::<f64>::from_elem((3, 5), 0.7);
        let loss = alignment_ce(u.view(), &[0, 4, 2]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let l: Array2<f64> = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-3.0..3.0));
            let labels = [rng.gen_range(0..4), rng.gen_range(0..4), 3];
            let mut expect = 0.0;
            for q in 0..3 {
                let z: f64 = (0..4).map(|c| l[[q, c]].exp()).sum();
                expect += -(l[[q, labels[q]]].exp() / z).ln();
            }
            assert!((alignment_ce(l.view(), &labels).unwrap() - expect / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn shift_invariance_per_row() {
        let l = array![[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]];
        let shifted = array![[11.0, 12.0, 10.5], [-5.0, -6.0, -2.0]];
        let a = alignment_ce(l.view(), &[1, 2]).unwrap();
        let b = alignment_ce(shifted.view(), &[1, 2]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_labels() {
        let l = array![[1.0, 2.0]];
        assert!(matches!(
            alignment_ce(l.view(), &[2]),
            Err(Error::Domain(_))
        ));
        assert!(alignment_ce(l.view(), &[0, 1]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let l = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-2.0..2.0));
            let labels = [0, 4, 2, 4];
            let (_, g) = alignment_ce_with_grad(l.view(), &labels).unwrap();
            let flat: Vec<f64> = l.iter().copied().collect();
            let fd = central_difference(
                |x| {
                    let v = ArrayView2::from_shape((4, 5), x).unwrap();
                    alignment_ce(v, &labels).unwrap()
                },
                &flat,
                1e-5,
            );
            let g: Vec<f64> = g.iter().copied().collect();
            assert!(relative_error(&g, &fd, 1e-8) <= 1e-4);
        }
    }
}
