//! Seeded random streams.
//!
//! Every consumer of randomness asks for a named substream of the run seed
//! (`"init"`, `"data"`, `"augment"`, ...), so changing how one component draws
//! numbers never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

// FNV-1a, stable across platforms and releases.
fn stream_id(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// The substream `name` of `seed`.
pub fn substream(seed: u64, name: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(name));
    rng
}
