//! Deterministic RNG streams.
//!
//! Every random decision in the toolkit draws from a stream derived from
//! (base seed, label, indices). Streams are independent of call order, so
//! e.g. the masking stream of an MLM run does not shift when the model
//! init consumes a different number of samples.

use rand_chacha::ChaCha8Rng;

use rand::SeedableRng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mix a base seed with a stream label and per-stream indices into one u64.
pub fn derive_seed(base: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix(base);
    for &b in label.as_bytes() {
        h = splitmix(h ^ b as u64);
    }
    for &ix in indices {
        h = splitmix(h ^ ix);
    }
    h
}

/// Independent RNG stream for (base, label, indices).
pub fn stream(base: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, label, indices))
}
