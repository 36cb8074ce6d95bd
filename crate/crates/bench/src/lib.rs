//! Shared fixtures for the criterion benches: seeded random images and
//! feature maps at the sizes the benches exercise.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

/// A seeded random image or feature map with values in `[0, 1]`.
pub fn random_map(c: usize, h: usize, w: usize, seed: u64) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array3::<f32>::zeros((c, h, w));
    out.mapv_inplace(|_| rng.random_range(0.0f32..=1.0));
    out
}
