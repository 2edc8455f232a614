//! Named random sub-streams derived from one root seed.
//!
//! Each pipeline stage draws from its own ChaCha stream, selected by hashing
//! the stage name, so extra draws in one stage never shift another's.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const SYNTH: &str = "synth";
pub const TRAIN: &str = "train";
pub const BIAS: &str = "bias";
pub const INIT: &str = "init";
pub const TEST: &str = "test";

fn fnv1a(name: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Deterministic generator for stage `name` under `root_seed`.
pub fn stream(root_seed: u64, name: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(fnv1a(name));
    rng
}
