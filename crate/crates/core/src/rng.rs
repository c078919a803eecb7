use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random stream for item `stream` under a run seed, so
/// per-item work gives the same result in any execution order.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids for distinct purposes under one seed.
pub(crate) mod purpose {
    pub const SPLIT: u64 = 1 << 40;
    pub const SUBSAMPLE: u64 = 2 << 40;
    pub const INIT: u64 = 3 << 40;
    pub const SHUFFLE: u64 = 4 << 40;
    pub const SAMPLE_CASES: u64 = 5 << 40;
    pub const UNDERCODING: u64 = 6 << 40;
}
