use crate::error::{Error, Result};

/// Predicted probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

const DICE_SMOOTH: f64 = 1.0;

fn check(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "mask sizes differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("empty mask".into()));
    }
    Ok(())
}

/// Mean per-pixel binary cross-entropy between a soft mask and a binary
/// ground-truth mask (both flattened row-major).
pub fn bce_mask_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    bce_mask_loss_with_grad(pred, gt).map(|(l, _)| l)
}

/// BCE and its gradient with respect to `pred`. Pixels outside the clamp
/// range get a zero gradient.
pub fn bce_mask_loss_with_grad(pred: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    check(pred, gt)?;
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            loss -= g * pc.ln() + (1.0 - g) * (1.0 - pc).ln();
            if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                0.0
            } else {
                (-g / pc + (1.0 - g) / (1.0 - pc)) / n
            }
        })
        .collect();
    Ok((loss / n, grad))
}

/// `1 - (2 sum(p g) + 1) / (sum(p) + sum(g) + 1)`.
pub fn dice_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    dice_loss_with_grad(pred, gt).map(|(l, _)| l)
}

pub fn dice_loss_with_grad(pred: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    check(pred, gt)?;
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let denom = pred.iter().sum::<f64>() + gt.iter().sum::<f64>() + DICE_SMOOTH;
    let numer = 2.0 * inter + DICE_SMOOTH;
    let grad = gt
        .iter()
        .map(|&g| -(2.0 * g * denom - numer) / (denom * denom))
        .collect();
    Ok((1.0 - numer / denom, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bce_examples() {
        let gt = [1.0, 0.0, 1.0, 1.0];
        assert!(bce_mask_loss(&gt, &gt).unwrap() <= 1e-6);
        let half = [0.5; 4];
        assert!((bce_mask_loss(&half, &gt).unwrap() - 2f64.ln()).abs() < 1e-6);
        assert!(matches!(
            bce_mask_loss(&half, &gt[..3]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn bce_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let p: Vec<f64> = (0..16).map(|_| rng.gen_range(0.01..0.99)).collect();
            let g: Vec<f64> = (0..16)
                .map(|_| f64::from(rng.gen_bool(0.5) as u8))
                .collect();
            let mut expect = 0.0;
            for k in 0..16 {
                expect += if g[k] == 1.0 {
                    -p[k].ln()
                } else {
                    -(1.0 - p[k]).ln()
                };
            }
            assert!((bce_mask_loss(&p, &g).unwrap() - expect / 16.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dice_examples() {
        let ones = [1.0; 64];
        assert!(dice_loss(&ones, &ones).unwrap().abs() < 1e-9);
        let zeros = [0.0; 64];
        assert!(dice_loss(&zeros, &zeros).unwrap().abs() < 1e-12);
        // disjoint masks of area 5 each: 1 - 1 / (2*5 + 1)
        let mut p = [0.0; 20];
        let mut g = [0.0; 20];
        p[..5].fill(1.0);
        g[10..15].fill(1.0);
        let expect = 1.0 - 1.0 / 11.0;
        assert!((dice_loss(&p, &g).unwrap() - expect).abs() < 1e-12);
        assert!(dice_loss(&p, &g[..3]).is_err());
    }

    #[test]
    fn mask_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let p: Vec<f64> = (0..12).map(|_| rng.gen_range(0.05..0.95)).collect();
            let g: Vec<f64> = (0..12)
                .map(|_| f64::from(rng.gen_bool(0.4) as u8))
                .collect();
            let (_, a) = bce_mask_loss_with_grad(&p, &g).unwrap();
            let n = central_difference(|x| bce_mask_loss(x, &g).unwrap(), &p, 1e-5);
            assert!(relative_error(&a, &n, 1e-8) <= 1e-4);
            let (_, a) = dice_loss_with_grad(&p, &g).unwrap();
            let n = central_difference(|x| dice_loss(x, &g).unwrap(), &p, 1e-5);
            assert!(relative_error(&a, &n, 1e-8) <= 1e-4);
        }
    }

    proptest::proptest! {
        #[test]
        fn dice_in_unit_interval_and_bce_nonnegative(
            p in proptest::collection::vec(0.0f64..=1.0, 9),
            g in proptest::collection::vec(proptest::bool::ANY, 9),
        ) {
            let g: Vec<f64> = g.into_iter().map(|b| f64::from(b as u8)).collect();
            let d = dice_loss(&p, &g).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&d));
            proptest::prop_assert!(bce_mask_loss(&p, &g).unwrap() >= 0.0);
        }
    }
}
