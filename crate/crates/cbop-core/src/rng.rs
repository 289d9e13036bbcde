//! Seed derivation. Every random decision in the crate draws from a
//! `ChaCha8Rng` constructed here, so a run is a pure function of the global
//! seed plus a documented tag path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Each consumer of randomness gets its own constant so streams
/// never collide between subsystems.
pub mod tags {
    pub const DATA_EPISODE: u64 = 0x01;
    pub const DYNAMICS_INIT: u64 = 0x10;
    pub const DYNAMICS_BATCH: u64 = 0x11;
    pub const DYNAMICS_SPLIT: u64 = 0x12;
    pub const DYNAMICS_RESAMPLE: u64 = 0x13;
    pub const Q_INIT: u64 = 0x20;
    pub const POLICY_INIT: u64 = 0x21;
    pub const ROLLOUT: u64 = 0x30;
    pub const ROLLOUT_HORIZON: u64 = 0x31;
    pub const TRAIN_BATCH: u64 = 0x40;
    pub const POLICY_STEP: u64 = 0x41;
    pub const EVAL: u64 = 0x50;
    pub const BC: u64 = 0x60;
    pub const FQE: u64 = 0x61;
    pub const DIAG: u64 = 0x70;
}

/// splitmix64 finalizer; good avalanche, cheap, stable across platforms.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mix one tag into a seed.
pub fn derive(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ tag.wrapping_mul(0x9e3779b97f4a7c15))
}

/// Fold a whole tag path into a seed, left to right.
pub fn derive_path(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(seed, |s, &t| derive(s, t))
}

/// RNG for a tag path under a global seed.
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_path(seed, path))
}
