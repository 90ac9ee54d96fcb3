//! Counter-based random substreams.
//!
//! Every stochastic step in a simulation draws from a ChaCha8 stream addressed
//! by `(base_seed, label, index)`: the base seed is the key, the label is hashed
//! into the 64-bit stream id, and the index selects a disjoint block range via
//! the word position. Two addresses never share words, so results depend only
//! on the address and not on scheduling or the order in which streams are
//! opened.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Words reserved per index. 2^40 words is far beyond any replicate's demand.
const INDEX_SHIFT: u32 = 40;

/// FNV-1a, used only to turn labels into stream ids; stable across platforms.
pub fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn substream(base_seed: u64, label: &str, index: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(label_hash(label));
    rng.set_word_pos(u128::from(index) << INDEX_SHIFT);
    rng
}
