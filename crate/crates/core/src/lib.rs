//! Differentiable single-path architecture search for MBConv networks.
//!
//! Every searchable layer holds one [`superkernel::SuperKernel`]; kernel size,
//! expansion ratio and skip are decided by thresholding weight-subset norms.
//! A per-layer runtime lookup table makes the expected network latency a
//! differentiable function of those same gates.

pub mod error;
pub mod io;
pub mod latency;
pub mod oracle;
pub mod search;
pub mod superkernel;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};

/// Deterministic generator used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Seeded generator; identical seeds give identical streams on every platform.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
