//! Seeded random streams.
//!
//! Every stochastic routine draws from a ChaCha8 stream addressed by
//! `(seed, purpose, index)`. ChaCha is a counter-based generator, so the
//! stream for chain 17 is independent of how many draws chain 16 made and
//! of the thread that runs it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Tags that separate the streams of different consumers sharing one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Volume = 1,
    Diameter = 2,
    Chain = 3,
    Reference = 4,
    Bootstrap = 5,
    ErgodicFlow = 6,
    Partition = 7,
    Iso = 8,
    Pairs = 9,
    WarmStart = 10,
    Misc = 11,
    Floor = 12,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream `index` of the family keyed by `(seed, purpose)`.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> Rng {
    let mut key = [0u8; 32];
    let mut state = splitmix(seed ^ splitmix(purpose as u64));
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Number of shards used by Monte-Carlo loops. Fixed so results do not
/// depend on the thread count.
pub const SHARDS: usize = 64;

/// Split `n` draws into `SHARDS` contiguous counts.
pub fn shard_sizes(n: usize) -> Vec<usize> {
    let base = n / SHARDS;
    let extra = n % SHARDS;
    (0..SHARDS).map(|i| base + usize::from(i < extra)).collect()
}
