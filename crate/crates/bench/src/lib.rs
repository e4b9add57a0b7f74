//! Inputs shared by the benchmarks.

use zsda_core::denoiser::{Conditioning, Denoiser, DenoiserConfig};
use zsda_core::rng::{gaussian_tensor, rng_from_seed};
use zsda_core::scene::{render_seed, Domain, SceneSample};
use zsda_core::tensor::Tensor3;

pub fn scenes(n: u64, domain: Domain) -> Vec<SceneSample> {
    (0..n).map(|s| render_seed(s, domain)).collect()
}

pub fn noisy_input(seed: u64) -> Tensor3 {
    let s = render_seed(seed, Domain::Day);
    let (c, h, w) = s.image.shape();
    gaussian_tensor(&mut rng_from_seed(seed), c, h, w)
}

/// A default-size denoiser and a matching conditioning.
pub fn denoiser_fixture() -> (Denoiser, Conditioning) {
    let den = Denoiser::new(DenoiserConfig::default(), 0).expect("default config is valid");
    let s = render_seed(0, Domain::Day);
    (den, Conditioning::new(Domain::Night.id(), s.layout, true))
}
