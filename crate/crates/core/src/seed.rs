use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Independent random stream for `(seed, purpose, key)`, so per-item work is
/// reproducible regardless of processing order.
pub fn derived_rng(seed: u64, purpose: &str, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update([0u8]);
    h.update(key.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// A 64-bit seed drawn from the same derivation.
pub fn derived_seed(seed: u64, purpose: &str, key: &str) -> u64 {
    use rand::Rng;
    derived_rng(seed, purpose, key).random()
}
