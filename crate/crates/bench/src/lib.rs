//! Seeded fixtures shared by the benchmarks.

use ovcal::embeddings::Embedding;
use ovcal::ndarray::Array2;
use ovcal::rng::{self, Substream};

pub fn embeddings(n: usize, d: usize, seed: u64) -> Vec<Embedding> {
    (0..n as u64)
        .map(|i| {
            let mut r = rng::stream(seed, Substream::Init, &[i]);
            Embedding::new(rng::gaussian_vec(&mut r, d)).expect("finite")
        })
        .collect()
}

pub fn costs(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::stream(seed, Substream::Init, &[u64::MAX]);
    let v = rng::gaussian_vec(&mut r, rows * cols);
    Array2::from_shape_vec((rows, cols), v).expect("rows * cols values")
}
