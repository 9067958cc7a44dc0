//! Embedding vectors, similarity and distance kernels, and the synthetic
//! frozen teacher.

mod category;
mod store;
mod teacher;

pub use category::{CategoryEntry, CategoryTable};
pub use store::{read_embedding_store, write_embedding_store, EmbeddingRecord};
pub use teacher::{ImageLayout, InstanceDescriptor, Rect, TeacherConfig, TeacherSpace};

use ndarray::{ArrayView2, ArrayView3};

use crate::error::{shape_err, Error, Result};

/// Smoothing constant for [`l2_distance`].
pub const DIST_EPS: f64 = 1e-12;

const NORM_TOL: f64 = 1e-9;

/// A fixed-dimension real vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    /// Builds an embedding, rejecting `dim < 2` and non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(shape_err(format!(
                "embedding dimension must be at least 2, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("embedding has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    /// Builds a unit-norm embedding from an arbitrary nonzero vector.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let e = Self::new(values)?;
        e.to_unit()
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn is_normalized(&self) -> bool {
        (self.norm() - 1.0).abs() <= NORM_TOL
    }

    pub fn to_unit(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::Domain("cannot normalize a zero vector".into()));
        }
        Ok(Self {
            values: self.values.iter().map(|v| v / n).collect(),
        })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity on raw slices; no validation. Zero vectors give NaN.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0)
}

/// Cosine similarity and its gradient with respect to `a`.
pub fn cosine_with_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let na = norm(a);
    let nb = norm(b);
    let c = dot(a, b) / (na * nb);
    let grad = a
        .iter()
        .zip(b)
        .map(|(x, y)| y / (na * nb) - c * x / (na * na))
        .collect();
    (c, grad)
}

/// Smoothed Euclidean distance `sqrt(|a-b|^2 + eps) - sqrt(eps)` on raw slices.
pub fn smoothed_distance(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sq + DIST_EPS).sqrt() - DIST_EPS.sqrt()
}

/// Gradient of [`smoothed_distance`] with respect to `a`.
pub fn smoothed_distance_grad(a: &[f64], b: &[f64]) -> Vec<f64> {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let denom = (sq + DIST_EPS).sqrt();
    a.iter().zip(b).map(|(x, y)| (x - y) / denom).collect()
}

pub fn cosine_sim(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(shape_err(format!("dimensions {} and {}", a.dim(), b.dim())));
    }
    if a.norm() == 0.0 || b.norm() == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero vector".into()));
    }
    Ok(cosine(a.as_slice(), b.as_slice()))
}

pub fn l2_distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(shape_err(format!("dimensions {} and {}", a.dim(), b.dim())));
    }
    Ok(smoothed_distance(a.as_slice(), b.as_slice()))
}

/// Mask-weighted average of a grid of tokens.
///
/// `tokens` is `H x W x D`, `mask` is `H x W` with weights in `[0, 1]`.
pub fn mask_pool(tokens: ArrayView3<f64>, mask: ArrayView2<f64>) -> Result<Embedding> {
    let (h, w, d) = tokens.dim();
    if mask.dim() != (h, w) {
        return Err(shape_err(format!(
            "token grid is {h}x{w}, mask is {:?}",
            mask.dim()
        )));
    }
    let total: f64 = mask.sum();
    if total <= 0.0 {
        return Err(Error::EmptyRegion);
    }
    let mut acc = vec![0.0; d];
    for ((y, x), &m) in mask.indexed_iter() {
        if m == 0.0 {
            continue;
        }
        for (a, t) in acc.iter_mut().zip(tokens.slice(ndarray::s![y, x, ..])) {
            *a += m * t;
        }
    }
    Embedding::new(acc.into_iter().map(|a| a / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use proptest::prelude::*;

    fn e(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&e(&[1.0, 0.0]), &e(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine_sim(&e(&[1.0, 0.0]), &e(&[0.0, 1.0])).unwrap(), 0.0);
        // 8 / (3 * 3)
        let c = cosine_sim(&e(&[1.0, 2.0, 2.0]), &e(&[2.0, 1.0, 2.0])).unwrap();
        assert!((c - 8.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_sim(&e(&[0.0, 0.0]), &e(&[1.0, 0.0])),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            cosine_sim(&e(&[1.0, 0.0]), &e(&[1.0, 0.0, 0.0])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn embedding_rejects_bad_input() {
        assert!(Embedding::new(vec![1.0]).is_err());
        assert!(Embedding::new(vec![1.0, f64::NAN]).is_err());
        assert!(Embedding::normalized(vec![0.0, 0.0]).is_err());
        assert!(Embedding::normalized(vec![3.0, 4.0])
            .unwrap()
            .is_normalized());
    }

    #[test]
    fn distance_examples() {
        let x = e(&[0.3, -1.2, 4.0]);
        assert!(l2_distance(&x, &x).unwrap().abs() < 1e-6);
        let d = l2_distance(&e(&[0.0, 0.0]), &e(&[3.0, 4.0])).unwrap();
        assert!((d - 5.0).abs() < 1e-6);
        assert!(l2_distance(&e(&[0.0, 0.0]), &e(&[0.0, 0.0, 1.0])).is_err());
    }

    #[test]
    fn smoothed_distance_tracks_plain_distance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let plain = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((smoothed_distance(&a, &b) - plain).abs() < 1e-5);
        }
    }

    #[test]
    fn mask_pool_examples() {
        let mut tokens = Array3::<f64>::zeros((2, 2, 3));
        for (i, v) in tokens.iter_mut().enumerate() {
            *v = i as f64 * 0.5 - 1.0;
        }
        let ones = Array2::<f64>::ones((2, 2));
        let pooled = mask_pool(tokens.view(), ones.view()).unwrap();
        for k in 0..3 {
            let mean = (0..2)
                .flat_map(|y| (0..2).map(move |x| (y, x)))
                .map(|(y, x)| tokens[[y, x, k]])
                .sum::<f64>()
                / 4.0;
            assert!((pooled.as_slice()[k] - mean).abs() < 1e-12);
        }

        let mut delta = Array2::<f64>::zeros((2, 2));
        delta[[1, 0]] = 1.0;
        let pooled = mask_pool(tokens.view(), delta.view()).unwrap();
        assert_eq!(
            pooled.as_slice(),
            tokens.slice(ndarray::s![1, 0, ..]).to_vec()
        );

        // mask [1,1,0,0] row-major: first two tokens are (0,0) and (0,1)
        let half = Array2::from_shape_vec((2, 2), vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let pooled = mask_pool(tokens.view(), half.view()).unwrap();
        let expect = [(-1.0 + 0.5) / 2.0, (-0.5 + 1.0) / 2.0, (0.0 + 1.5) / 2.0];
        for (p, x) in pooled.as_slice().iter().zip(expect) {
            assert!((p - x).abs() < 1e-12);
        }

        let zeros = Array2::<f64>::zeros((2, 2));
        assert!(matches!(
            mask_pool(tokens.view(), zeros.view()),
            Err(Error::EmptyRegion)
        ));
        let wrong = Array2::<f64>::ones((3, 2));
        assert!(matches!(
            mask_pool(tokens.view(), wrong.view()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn cosine_gradient_matches_central_difference() {
        let a = [0.4, -1.1, 0.7, 2.0];
        let b = [1.0, 0.2, -0.3, 0.5];
        let (_, g) = cosine_with_grad(&a, &b);
        let fd = crate::gradcheck::central_difference(|x| cosine(x, &b), &a, 1e-6);
        for (x, y) in g.iter().zip(&fd) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    fn vec16() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, 16)
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(a in vec16(), b in vec16(), s in 0.01f64..100.0) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let ea = e(&a);
            let eb = e(&b);
            let c = cosine_sim(&ea, &eb).unwrap();
            prop_assert!((c - cosine_sim(&eb, &ea).unwrap()).abs() < 1e-12);
            prop_assert!((c - cosine_sim(&ea.scaled(s), &eb).unwrap()).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&c));
        }

        #[test]
        fn distance_triangle_inequality(a in vec16(), b in vec16(), c in vec16()) {
            let (ea, eb, ec) = (e(&a), e(&b), e(&c));
            let ab = l2_distance(&ea, &eb).unwrap();
            let bc = l2_distance(&eb, &ec).unwrap();
            let ac = l2_distance(&ea, &ec).unwrap();
            prop_assert!(ac <= ab + bc + 1e-6);
            prop_assert!(ab >= 0.0);
        }
    }
}
