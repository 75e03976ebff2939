//! Named random streams derived from one master seed.
//!
//! The seed for stream `name` is the first eight bytes (little endian) of
//! `SHA-256(master.to_le_bytes() || name)`, so streams are keyed by name and
//! independent of the order in which they are requested.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub const ENV: &str = "env";
pub const TS: &str = "ts";
pub const NU: &str = "nu";
pub const INIT: &str = "init";
pub const BATCH: &str = "batch";
pub const EVAL: &str = "eval";

pub fn derive_seed(master: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(master: u64, name: &str) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(master, name))
}

/// Seeds for several streams at once.
pub fn seed_everything(master: u64, names: &[&str]) -> Vec<(String, u64)> {
    names.iter().map(|n| (n.to_string(), derive_seed(master, n))).collect()
}
