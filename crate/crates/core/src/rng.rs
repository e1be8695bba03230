//! Seed derivation for independent, reproducible random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used for every stream in the simulator.
pub type StreamRng = ChaCha8Rng;

/// Well-known stream tags. Client streams use the client id directly, so the
/// server-side tags live at the top of the `u64` range.
pub mod tag {
    pub const TASK: u64 = u64::MAX;
    pub const PRETRAIN: u64 = u64::MAX - 1;
    pub const PARTICIPANTS: u64 = u64::MAX - 2;
    pub const ORACLE: u64 = u64::MAX - 3;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a global seed and a stream id into a 64-bit stream seed.
pub fn derive_seed(global_seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(global_seed) ^ splitmix64(stream.rotate_left(17)))
}

pub fn stream(global_seed: u64, stream: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(global_seed, stream))
}
