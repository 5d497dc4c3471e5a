//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream addressed by a
//! `(seed, domain, index)` triple. The key is built from `seed` and a domain
//! tag and the ChaCha stream id is `index`, so any draw can be reproduced
//! without replaying the draws that came before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Separates the random streams used by different parts of the crate so that
/// e.g. mask draw 3 and augmentation draw 3 under the same seed never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Mask = 1,
    Init = 2,
    Dataset = 3,
    Augment = 4,
    Shuffle = 5,
    Probe = 6,
}

/// Returns the generator for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}
