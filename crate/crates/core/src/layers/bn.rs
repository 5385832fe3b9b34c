//! Batch normalisation from one sample at a time.
//!
//! Each sample contributes its per-channel mean `μᵢ` and second moment
//! `σᵢ² + μᵢ²`. In [`BnMode::Streaming`] both are tracked with an
//! exponential moving average of decay `η = 1 − 1/B` (bias-corrected for the
//! zero start); in [`BnMode::PlainAverage`] they are summed over windows of
//! `B` samples, which reproduces whole-batch statistics at window end.
//! Normalisation statistics are treated as constants in the backward pass.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    #[default]
    Streaming,
    PlainAverage,
}

#[derive(Debug, Clone)]
pub struct StreamBn {
    mode: BnMode,
    batch: usize,
    eta: f64,
    mu_s: Array1<f64>,
    sq_s: Array1<f64>,
    count: u64,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
    cache: Option<(Array2<f64>, Array1<f64>)>,
}

impl StreamBn {
    pub fn new(channels: usize, batch: usize, mode: BnMode) -> Self {
        let batch = batch.max(1);
        Self {
            mode,
            batch,
            eta: 1.0 - 1.0 / batch as f64,
            mu_s: Array1::zeros(channels),
            sq_s: Array1::zeros(channels),
            count: 0,
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            eps: BN_EPS,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Scalars of persistent state: two accumulators plus `γ`, `β`.
    pub fn state_values(&self) -> usize {
        4 * self.channels()
    }

    /// Folds one sample (`pixels x channels`) into the accumulators.
    pub fn observe(&mut self, x: ArrayView2<f64>) {
        let n = x.nrows().max(1) as f64;
        let mu_i = x.sum_axis(Axis(0)) / n;
        let sq_i = x.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        match self.mode {
            BnMode::Streaming => {
                self.mu_s = &self.mu_s * self.eta + &mu_i * (1.0 - self.eta);
                self.sq_s = &self.sq_s * self.eta + &sq_i * (1.0 - self.eta);
            }
            BnMode::PlainAverage => {
                if self.count > 0 && self.count % self.batch as u64 == 0 {
                    self.mu_s.fill(0.0);
                    self.sq_s.fill(0.0);
                }
                self.mu_s += &mu_i;
                self.sq_s += &sq_i;
            }
        }
        self.count += 1;
    }

    /// Current batch estimates `(μ_b, σ_b²)`.
    pub fn batch_stats(&self) -> (Array1<f64>, Array1<f64>) {
        if self.count == 0 {
            return (
                Array1::zeros(self.channels()),
                Array1::ones(self.channels()),
            );
        }
        let scale = match self.mode {
            BnMode::Streaming => 1.0 / (1.0 - self.eta.powi(self.count.min(i32::MAX as u64) as i32)),
            BnMode::PlainAverage => {
                let in_window = (self.count - 1) % self.batch as u64 + 1;
                1.0 / in_window as f64
            }
        };
        let mu = &self.mu_s * scale;
        let sq = &self.sq_s * scale;
        let var = (&sq - &mu.mapv(|m| m * m)).mapv(|v| v.max(0.0));
        (mu, var)
    }

    /// Optionally observes `x`, then normalises it with the current batch
    /// estimates and applies `γ`, `β`.
    pub fn forward(&mut self, x: ArrayView2<f64>, update_stats: bool) -> Array2<f64> {
        if update_stats {
            self.observe(x);
        }
        let (mu, var) = self.batch_stats();
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let x_hat = (&x - &mu) * &inv_std;
        let y = &x_hat * &self.gamma + &self.beta;
        self.cache = Some((x_hat, inv_std));
        y
    }

    /// Returns `(∂/∂x, ∂/∂γ, ∂/∂β)` for the last forward call.
    pub fn backward(&self, g_y: ArrayView2<f64>) -> Option<(Array2<f64>, Array1<f64>, Array1<f64>)> {
        let (x_hat, inv_std) = self.cache.as_ref()?;
        let d_gamma = (&g_y * x_hat).sum_axis(Axis(0));
        let d_beta = g_y.sum_axis(Axis(0));
        let g_x = &g_y * &(&self.gamma * inv_std);
        Some((g_x, d_gamma, d_beta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn batch_of_one_uses_own_statistics() {
        let mut bn = StreamBn::new(1, 1, BnMode::Streaming);
        bn.forward(array![[5.0], [7.0]].view(), true);
        let y = bn.forward(array![[1.0], [3.0]].view(), true);
        let s = (1.0f64 + BN_EPS).sqrt();
        assert!((y[[0, 0]] + 1.0 / s).abs() < 1e-12);
        assert!((y[[1, 0]] - 1.0 / s).abs() < 1e-12);
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let mut bn = StreamBn::new(1, 1, BnMode::Streaming);
        bn.beta[0] = 0.25;
        let y = bn.forward(array![[4.0], [4.0], [4.0]].view(), true);
        assert!(y.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn frozen_forward_leaves_statistics() {
        let mut bn = StreamBn::new(2, 4, BnMode::Streaming);
        bn.forward(array![[1.0, 2.0]].view(), true);
        let before = bn.batch_stats();
        bn.forward(array![[9.0, -9.0]].view(), false);
        assert_eq!(bn.batch_stats(), before);
    }

    #[test]
    fn backward_requires_forward() {
        let bn = StreamBn::new(1, 2, BnMode::Streaming);
        assert!(bn.backward(array![[1.0]].view()).is_none());
    }
}
