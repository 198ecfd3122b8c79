//! Seed fan-out. One master seed drives every random draw; each consumer gets
//! its own ChaCha stream so adding a consumer never shifts another's numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream families. The discriminant occupies the high 32 bits of the
/// ChaCha stream id, the per-family index the low 32 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Stream {
    Weights = 1,
    Feedback = 2,
    Shuffle = 3,
    Prfs = 4,
    Genetic = 5,
    Trial = 6,
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 32) | (index & 0xffff_ffff));
    rng
}

/// Derives a child seed, e.g. one per sweep trial.
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    use rand::RngCore;
    stream_rng(seed, stream, index).next_u64()
}
