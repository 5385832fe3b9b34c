//! Low-rank training (LRT) of quantized networks for write-limited weight
//! memory.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: small dense kernels (Gram-Schmidt insert, Jacobi SVD,
//!   Householder bases).
//! - [`lowrank`]: the streaming rank-`r` accumulator and its biased and
//!   unbiased reductions.
//! - [`quant`]: power-of-2 fixed-point quantizers.
//! - [`layers`]: quantized dense/conv layers, streaming batch norm, max-norm.
//! - [`trainer`]: the online loop with write accounting and drift.
//! - [`convergence`]: linear-regression laboratory for the error bounds.
//! - [`datagen`]: IDX loading, augmentation and online streams.
//! - [`harness`]: experiment configs, scenarios, ablations and sweeps.

pub mod linalg;
pub mod lowrank;
pub mod quant;
pub mod layers;
pub mod trainer;
pub mod convergence;
pub mod datagen;
pub mod harness;
