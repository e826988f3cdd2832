//! Dual-rate diffusion on desk-scale problems.
//!
//! A heavy context encoder is evaluated at `K` sparse times and its features
//! are reused by a light denoiser at all `k` sampling steps. Everything is
//! checked against closed-form Gaussian-mixture quantities instead of large
//! image benchmarks.
//!
//! Module map:
//! - [`nnkit`]: dense MLPs with Fourier time embeddings, FiLM, hand-written
//!   reverse-mode gradients, Adam and EMA.
//! - [`schedule`]: variance-preserving cosine log-SNR schedule and loss weights.
//! - [`process`]: forward marginals, Markovian posteriors and bridges.
//! - [`data`]: Gaussian mixtures, grid patterns, augmentation, label dropping.
//! - [`models`]: the encoder/denoiser pair, guidance and the analytic oracle.
//! - [`train`]: dual-rate diffusion training.
//! - [`sample`]: dual-rate ancestral sampling and evaluation counts.
//! - [`distill`]: dual-rate moment matching distillation.
//! - [`eval`]: sliced Wasserstein, oracle MSE, ELBO and cost accounting.

pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod models;
pub mod nnkit;
pub mod process;
pub mod sample;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};

/// Random stream used everywhere. ChaCha8 is portable and its position can
/// be saved and restored, which checkpoint resume relies on.
pub type SimRng = rand_chacha::ChaCha8Rng;

/// Builds a [`SimRng`] from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> SimRng {
    use rand::SeedableRng;
    SimRng::seed_from_u64(seed)
}

/// Derives an independent seed for a named sub-stream.
///
/// Uses SplitMix64 finalisation so nearby inputs give unrelated outputs.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
