//! Reproducible random streams.
//!
//! Every Monte Carlo experiment takes a single `u64` seed. Replica `k` draws
//! from ChaCha stream `k` of that seed, so results do not depend on how
//! replicas are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type SimRng = ChaCha8Rng;

/// Generator for replica `stream` of experiment `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
