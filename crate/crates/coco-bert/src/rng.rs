//! Seeded RNG plumbing. One root seed fans out into labelled sub-streams so
//! that data generation, parameter init and masking draw from independent,
//! reproducible sequences.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive a sub-stream from `seed` for a named purpose. Streams with
/// different labels are statistically independent; the same (seed, label)
/// always yields the same stream.
pub fn sub_rng(seed: u64, label: &str) -> ChaCha8Rng {
    // FNV-1a over the label, mixed into the seed.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// Snapshot of a ChaCha8 stream: 32-byte seed plus 128-bit word position.
/// Enough to reproduce the stream bit-for-bit from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

pub fn capture(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: rng.get_seed(),
        word_pos: rng.get_word_pos(),
    }
}

pub fn restore(state: &RngState) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(state.seed);
    rng.set_word_pos(state.word_pos);
    rng
}
