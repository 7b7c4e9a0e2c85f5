//! Deterministic seed derivation.
//!
//! All randomness in the crate flows from a single 64-bit root seed. Child
//! seeds are derived by mixing the root with a purpose tag and an index
//! through SplitMix64, so adding a new consumer never perturbs the streams of
//! existing ones and runs are reproducible regardless of scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for seed splitting. The numeric values are part of the
/// reproducibility contract; append, never renumber.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Scene = 1,
    QuerySplit = 2,
    ParamInit = 3,
    Batch = 4,
    Noise = 5,
    BodyPoints = 6,
    Jitter = 7,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derives a child seed from `(root, stream, index)`.
pub fn child_seed(root: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ (stream as u64).rotate_left(32)).wrapping_add(index))
}

/// An RNG for one `(root, stream, index)` cell.
pub fn rng(root: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(root, stream, index))
}
