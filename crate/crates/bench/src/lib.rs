//! Shared fixtures for the criterion benches.

use primed_core::data::{Dataset, EncodedData};
use primed_core::synth::{generate, SynthConfig};
use primed_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("rows * cols values")
}

/// Scores in `[0, 1)` and labels with roughly 30% positives.
pub fn scored_labels(n: usize, seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (rng.random::<f64>(), rng.random_bool(0.3) as u8))
        .unzip()
}

pub fn synth_batch(records: usize) -> (Dataset, EncodedData) {
    let (data, _) = generate(&SynthConfig {
        records,
        ..SynthConfig::default()
    })
    .expect("valid synth config");
    let enc = data.encode();
    (data, enc)
}
