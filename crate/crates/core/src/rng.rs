//! Named random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream whose key is a
//! SHA-256 digest of `(global seed, stream name, indices...)`. Streams in use:
//!
//! | name        | indices                  | consumer                         |
//! |-------------|--------------------------|----------------------------------|
//! | `split`     | –                        | train/eval relation split        |
//! | `synth`     | –                        | synthetic graph generator        |
//! | `init`      | –                        | encoder parameter init           |
//! | `sampling`  | step, u, v               | Poisson inclusion of a relation  |
//! | `tuple`     | step, u, v               | decoupled negatives of a tuple   |
//! | `noise`     | step                     | Gaussian noise of one update     |
//! | `eval`      | –                        | evaluation batching / probes     |
//! | `audit`     | –                        | membership-inference sampling    |
//! | `rr`        | –                        | randomized response flips        |

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Derives a 64-bit key from a seed, a stream name and a list of indices.
pub fn derive_key(seed: u64, stream: &str, indices: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"dprel/v1");
    hasher.update(seed.to_le_bytes());
    hasher.update((stream.len() as u64).to_le_bytes());
    hasher.update(stream.as_bytes());
    for idx in indices {
        hasher.update(idx.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(word)
}

/// Uniform draw in `[0, 1)` that is a pure function of its key material.
pub fn keyed_uniform(seed: u64, stream: &str, indices: &[u64]) -> f64 {
    (derive_key(seed, stream, indices) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Seeded stream for the given key material.
pub fn stream(seed: u64, name: &str, indices: &[u64]) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_key(seed, name, indices))
}
