//! Shared fixtures for the criterion benches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spikerpe_core::SpikeTensor;

/// Deterministic query/key pair with roughly half the bits set.
pub fn spike_pair(steps: usize, len: usize, channels: usize, seed: u64) -> (SpikeTensor, SpikeTensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = SpikeTensor::random(steps, len, channels, 0.5, &mut rng);
    let k = SpikeTensor::random(steps, len, channels, 0.5, &mut rng);
    (q, k)
}
