//! Quantized layers that hand their weight gradients to a low-rank
//! accumulator instead of writing them to weight memory.
//!
//! Forward through one affine stage:
//!
//! ```text
//! z = Qb(α·W·a + b)      y = Qb(BN(z))      a_out = Qa(ReLU(y))
//! ```
//!
//! Backward from `δ = ∂L/∂a_out`:
//!
//! ```text
//! dz = Qg(maxnorm(BN′(δ ⊙ ReLU′(y))))     δ_in = Qb(α·Wᵀ·dz)
//! ```
//!
//! and the pair `(dz, a)` is pushed to the layer's [`LowRankState`]. Biases
//! and batch-norm affine parameters are updated every sample; weights only
//! change at apply events (or every sample in plain SGD mode).

mod affine;
pub mod bn;
mod conv;
mod dense;
pub mod im2col;
pub mod maxnorm;
mod network;
mod pool;

pub use affine::{AffineCore, ApplyEvent, ApplyParams, WriteCounter};
pub use bn::{BnMode, StreamBn};
pub use conv::ConvLayer;
pub use dense::DenseLayer;
pub use im2col::{col2im, im2col, im2col_with, ConvGeometry};
pub use maxnorm::MaxNorm;
pub use network::{he_alpha, softmax_cross_entropy, Layer, LayerSpec, LrtOptions, NetOptions, NetSpec, Network};
pub use pool::MaxPool2;

use thiserror::Error;

use crate::lowrank::LrtError;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("{what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error("backward called before forward")]
    NoForward,
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid network: {0}")]
    Config(String),
    #[error(transparent)]
    Lrt(#[from] LrtError),
}

/// Where weight gradients go during a backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightRoute {
    /// Weights are not trained.
    Frozen,
    /// Per-pixel `(dz, a)` pairs are pushed into the low-rank accumulator.
    Lrt,
    /// The quantized gradient is written straight to the weights.
    Sgd { per_pixel: bool },
}

/// Per-step training switches for a backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardCtx {
    pub lr: f64,
    pub train_bias: bool,
    pub train_bn: bool,
    pub weights: WeightRoute,
}

impl BackwardCtx {
    /// Gradient flows and pairs are accumulated, but no parameter changes.
    pub fn accumulate_only() -> Self {
        Self {
            lr: 0.0,
            train_bias: false,
            train_bn: false,
            weights: WeightRoute::Lrt,
        }
    }
}
