//! Named sub-seeding: every random stream in a run derives from the single
//! run seed plus a component name and an index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_rng(seed: u64, name: &str, index: u64) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((name.len() as u64).to_le_bytes());
    hasher.update(name.as_bytes());
    hasher.update(index.to_le_bytes());
    Rng::from_seed(hasher.finalize().into())
}

pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    use rand::RngCore;
    derive_rng(seed, name, index).next_u64()
}
