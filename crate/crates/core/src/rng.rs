//! Seeded, stream-separated random generators.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream used by mirror-descent vertex sampling.
pub const MD_STREAM: u64 = 1;
/// Stream used by the instance generator.
pub const GENERATOR_STREAM: u64 = 2;

/// ChaCha8 generator for `seed`, advanced to an independent `stream`.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
