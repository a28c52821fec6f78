use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Independent RNG stream derived from a seed and a path of tags
/// (e.g. `[PURPOSE, step, slot]`). Streams never depend on call order.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for t in tags {
        h.update(t.to_le_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

pub mod purpose {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const MASK: u64 = 3;
    pub const KMEANS: u64 = 4;
    pub const SYNTH: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const FOLDS: u64 = 7;
    pub const PROJECTION: u64 = 8;
    pub const EVAL: u64 = 9;
    pub const DROPOUT: u64 = 10;
}
