//! Seeded randomness. Every stochastic operation in the crate takes an
//! explicit [`Rng`]; nothing reads global entropy.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor3;

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mix two seeds into one (splitmix64 finalizer over a keyed combination).
pub fn derive_seed(master: u64, item: u64) -> u64 {
    let mut z = master
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(item ^ 0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Tensor of i.i.d. `N(0, 1)` entries.
pub fn gaussian_tensor(rng: &mut Rng, channels: usize, height: usize, width: usize) -> Tensor3 {
    let data = (0..channels * height * width)
        .map(|_| standard_normal(rng))
        .collect();
    Tensor3::from_vec(channels, height, width, data).expect("shape matches by construction")
}
