//! Fixtures shared by the benchmarks.

use convfocus::simscene::{free_field_atf_set, ArrayGeometry};
use convfocus::{AtfSet, StftConfig, SPEED_OF_SOUND};
use ndarray::Array2;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SAMPLE_RATE: f64 = 48_000.0;

pub fn stft() -> StftConfig {
    StftConfig::default()
}

/// Free-field ATFs of the six-mic glasses array on an `n_dirs` grid.
pub fn glasses_atf(n_dirs: usize) -> AtfSet {
    free_field_atf_set(
        &ArrayGeometry::glasses(),
        n_dirs,
        stft().n_bins(),
        SAMPLE_RATE,
        SPEED_OF_SOUND,
    )
    .expect("valid fixture")
}

/// Uniform noise, `[channel][sample]`.
pub fn noise(n_ch: usize, seconds: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = (seconds * SAMPLE_RATE) as usize;
    Array2::from_shape_fn((n_ch, len), |_| rng.random_range(-1.0..1.0))
}

/// Random square cost matrix in `[0, scale)`.
pub fn costs(n: usize, scale: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..n).map(|_| rng.random_range(0.0..scale)).collect())
        .collect()
}
