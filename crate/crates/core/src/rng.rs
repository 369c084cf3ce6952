use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic stream derived from one user seed.
///
/// Each consumer of randomness uses its own stream id so adding draws in one
/// place never shifts the sequence seen by another.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) mod streams {
    pub const SPLIT: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const SWAP: u64 = 3;
    pub const ENCODER_INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const COMPASS_INIT: u64 = 6;
    pub const COMPASS_SHUFFLE: u64 = 7;
    pub const BOOTSTRAP: u64 = 8;
    pub const PLAN: u64 = 9;
    pub const GRADCHECK: u64 = 10;
}
