//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a stream keyed by
//! `(seed, purpose, index)`, so a value never depends on how many draws
//! happened elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    HeWeights = 1,
    HeBiases = 2,
    SamplePoint = 3,
    Census = 4,
    Fiber = 5,
    Construction = 6,
    Perturbation = 7,
    ImageProbe = 8,
}

const INDEX_BITS: u32 = 48;

/// Independent generator for one `(seed, purpose, index)` triple.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    debug_assert!(index < 1 << INDEX_BITS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << INDEX_BITS) | (index & ((1 << INDEX_BITS) - 1)));
    rng
}

/// Stable 64-bit digest of arbitrary byte chunks.
pub fn digest_u64(chunks: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for c in chunks {
        h.update((c.len() as u64).to_le_bytes());
        h.update(c);
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest is 32 bytes"))
}
