//! Named, seed-derived random streams.
//!
//! Every stochastic subsystem draws from its own ChaCha stream of the one
//! run seed, so adding draws in one subsystem never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TRAJECTORY: u64 = 1;
pub const VIBRATION: u64 = 2;
pub const DISTANCE: u64 = 3;
pub const PARTITION: u64 = 10;
pub const MODEL_INIT: u64 = 20;
pub const DATA: u64 = 21;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
