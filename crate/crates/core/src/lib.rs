//! Few-shot classification under support/query shift.
//!
//! Entropic optimal transport, the transported-prototypes classifier and its
//! baselines, a small MLP feature extractor with conventional and transductive
//! batch normalization, class x domain episodic sampling, training loops and
//! the evaluation/ablation harness.

pub mod error;
pub mod backbone;
pub mod cli;
pub mod data;
pub mod eval;
pub mod learners;
pub mod ot;
pub mod training;

pub use error::{Error, Result};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent child seed for one purpose (`stream`) of a run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}
