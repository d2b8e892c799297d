//! Seeded parameter initialization.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub type SeedRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeedRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries drawn uniformly from `[-bound, bound)`.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
    t
}

/// Glorot-uniform bound for a `fan_in × fan_out` map.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// A stack of `slices` Glorot-initialized `fan_in × fan_out` maps, each slice
/// shrunk by `1/sqrt(slices)` so the hop sum keeps roughly unit gain.
pub fn filter_bank(rng: &mut impl Rng, slices: usize, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = glorot_bound(fan_in, fan_out) / (slices as f64).sqrt();
    uniform(rng, &[slices, fan_in, fan_out], bound)
}
