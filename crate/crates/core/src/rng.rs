//! Seeded, splittable random streams.
//!
//! Every stochastic engine draws from ChaCha20 (`rand_chacha`). The key is
//! expanded from the 64-bit user seed with `SeedableRng::seed_from_u64`, and
//! independent substreams are selected with the ChaCha stream counter: the
//! trajectory or replicate with index `k` uses stream `k`. The generator has
//! a 256-bit key plus a 64-bit stream id, and its output is platform
//! independent.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type SimRng = ChaCha20Rng;

/// Generator for substream `stream` of `seed`.
pub fn substream(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
