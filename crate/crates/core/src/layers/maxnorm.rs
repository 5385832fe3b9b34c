//! Per-tensor gradient scaling by the larger of the current max-abs element
//! and its bias-corrected moving average.

use ndarray::{Array, ArrayView, Dimension};

pub const MAXNORM_BETA: f64 = 0.999;
pub const MAXNORM_EPS: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct MaxNorm {
    pub beta: f64,
    pub eps: f64,
    k: u64,
    x_mv: f64,
}

impl Default for MaxNorm {
    fn default() -> Self {
        Self::new(MAXNORM_BETA, MAXNORM_EPS)
    }
}

impl MaxNorm {
    pub fn new(beta: f64, eps: f64) -> Self {
        Self {
            beta,
            eps,
            k: 0,
            x_mv: eps,
        }
    }

    pub fn evaluations(&self) -> u64 {
        self.k
    }

    pub fn moving_max(&self) -> f64 {
        self.x_mv
    }

    /// Updates the state with `g` and returns the divisor to apply.
    pub fn observe<D: Dimension>(&mut self, g: ArrayView<f64, D>) -> f64 {
        self.k += 1;
        let x_max = g.iter().fold(0.0f64, |m, v| m.max(v.abs())) + self.eps;
        self.x_mv = self.beta * self.x_mv + (1.0 - self.beta) * x_max;
        let corrected = self.x_mv / (1.0 - self.beta.powf(self.k as f64));
        x_max.max(corrected)
    }

    pub fn apply<D: Dimension>(&mut self, g: ArrayView<f64, D>) -> Array<f64, D> {
        let d = self.observe(g.view());
        g.mapv(|v| v / d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_tensor_first_call() {
        let mut m = MaxNorm::default();
        let out = m.apply(array![0.0, 0.0].view());
        assert_eq!(out, array![0.0, 0.0]);
        assert_eq!(m.evaluations(), 1);
    }

    #[test]
    fn worked_example() {
        let mut m = MaxNorm::default();
        let out = m.apply(array![0.5, -2.0].view());
        // 0.999·1e-4 + 0.001·2.0001 = 2.1e-3, corrected by 1/(1 − 0.999).
        assert!((m.moving_max() - 2.1e-3).abs() < 1e-15);
        assert!((out[0] - 0.5 / 2.1).abs() < 1e-9);
        assert!((out[1] + 2.0 / 2.1).abs() < 1e-9);
    }
}
