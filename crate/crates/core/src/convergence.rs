//! Linear-regression laboratory for the gradient-error bounds.
//!
//! The loss on a static batch is `f(W) = ‖W·X − Y‖²_F / (2B)` with gradient
//! `(W·X − Y)·Xᵀ / B` and Hessian `X·Xᵀ / B` (per output row). Its
//! eigenvalues are `σᵢ(X)²/B`; `c` is the smallest, `C` the largest and `c̃`
//! the smallest nonzero one. When `B < n_i` the loss is flat along the null
//! space of `Xᵀ`, so distances to the optimum are measured in the range of
//! `X`: `w̃ = (W − W*)·U` with `U` the left singular vectors of `X`.
//!
//! Trajectories track the per-step inequalities
//!
//! ```text
//! ‖ε‖        ≤ (c̃/2)·‖w̃ − w̃*‖        (noisy gradients)
//! Σ σ_q²     ≤ (c̃²/4)·‖w̃ − w̃*‖²      (biased low-rank)
//! Σ σ_r·σ_q  ≤ (c̃²/8)·‖w̃ − w̃*‖²      (unbiased low-rank)
//! ```
//!
//! alongside the same right-hand sides evaluated with `C`.

use std::fmt::Write as _;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{svd_thin, LinalgError};
use crate::lowrank::{LowRankState, LrtError, SigmaTail, Variant};
use crate::quant::QuantSpec;

/// Eigenvalues at or below this fraction of the largest count as zero.
pub const EIG_ZERO_REL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum ConvergenceError {
    #[error("dimensions must be positive, got n_i={n_i}, B={b}, n_o={n_o}")]
    Dims { n_i: usize, b: usize, n_o: usize },
    #[error("trajectory is empty")]
    Empty,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Lrt(#[from] LrtError),
}

pub type Result<T> = std::result::Result<T, ConvergenceError>;

/// Regression instance with its curvature data and optimum.
#[derive(Debug, Clone)]
pub struct ConvexProblem {
    /// `n_i x B` inputs.
    pub x: Array2<f64>,
    /// `n_o x B` targets.
    pub y: Array2<f64>,
    /// Minimum-norm optimum `Y·X⁺`.
    pub w_star: Array2<f64>,
    /// `n_i x rank` orthonormal basis of the range of `X`.
    pub range: Array2<f64>,
    /// Hessian eigenvalues on the range, descending.
    pub eig: Vec<f64>,
    pub c: f64,
    pub c_max: f64,
    pub c_tilde: f64,
    pub loss_star: f64,
}

/// Gaussian `X` and `Y` with the given shape.
pub fn make_problem(seed: u64, n_i: usize, b: usize, n_o: usize) -> Result<ConvexProblem> {
    if n_i == 0 || b == 0 || n_o == 0 {
        return Err(ConvergenceError::Dims { n_i, b, n_o });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_simple_fn((n_i, b), || StandardNormal.sample(&mut rng));
    let y = Array2::from_shape_simple_fn((n_o, b), || StandardNormal.sample(&mut rng));
    problem_from_data(x, y)
}

/// Builds curvature data and the optimum for explicit `X` (`n_i x B`) and
/// `Y` (`n_o x B`).
pub fn problem_from_data(x: Array2<f64>, y: Array2<f64>) -> Result<ConvexProblem> {
    let (n_i, b) = x.dim();
    let n_o = y.nrows();
    if n_i == 0 || b == 0 || n_o == 0 || y.ncols() != b {
        return Err(ConvergenceError::Dims { n_i, b, n_o });
    }
    // X = U S Vᵀ with U: n_i x p, V: B x p, p = min(n_i, B).
    let (u, sigma, v) = if n_i >= b {
        let t = svd_thin(x.view())?;
        (t.u, t.sigma, t.v)
    } else {
        let t = svd_thin(x.t())?;
        (t.v, t.sigma, t.u)
    };
    let top = sigma.first().copied().unwrap_or(0.0);
    let rank = sigma.iter().take_while(|&&s| s > top * EIG_ZERO_REL.sqrt() && s > 0.0).count();
    let bf = b as f64;
    let eig: Vec<f64> = sigma.iter().take(rank).map(|s| s * s / bf).collect();
    let u_r = u.slice(s![.., ..rank]).to_owned();
    let v_r = v.slice(s![.., ..rank]).to_owned();
    // W* = Y V S⁻¹ Uᵀ
    let mut yv = y.dot(&v_r);
    for (mut col, &s) in yv.axis_iter_mut(Axis(1)).zip(sigma.iter()) {
        col /= s;
    }
    let w_star = yv.dot(&u_r.t());
    let c_max = eig.first().copied().unwrap_or(0.0);
    let c_tilde = eig.last().copied().unwrap_or(0.0);
    let c = if rank == n_i { c_tilde } else { 0.0 };
    let mut p = ConvexProblem {
        x,
        y,
        w_star,
        range: u_r,
        eig,
        c,
        c_max,
        c_tilde,
        loss_star: 0.0,
    };
    p.loss_star = p.loss(p.w_star.view());
    Ok(p)
}

impl ConvexProblem {
    pub fn n_i(&self) -> usize {
        self.x.nrows()
    }

    pub fn batch(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_o(&self) -> usize {
        self.y.nrows()
    }

    pub fn residual(&self, w: ArrayView2<f64>) -> Array2<f64> {
        w.dot(&self.x) - &self.y
    }

    pub fn loss(&self, w: ArrayView2<f64>) -> f64 {
        let r = self.residual(w);
        r.iter().map(|v| v * v).sum::<f64>() / (2.0 * self.batch() as f64)
    }

    pub fn gradient(&self, w: ArrayView2<f64>) -> Array2<f64> {
        self.residual(w).dot(&self.x.t()) / self.batch() as f64
    }

    /// `‖(W − W*)·U‖_F`, the distance to the optimum within the range of `X`.
    pub fn range_distance(&self, w: ArrayView2<f64>) -> f64 {
        let d = (&w - &self.w_star).dot(&self.range);
        d.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Norm of the part of `m` acting on the range of `X`.
    pub fn range_norm(&self, m: ArrayView2<f64>) -> f64 {
        let p = m.dot(&self.range);
        p.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Gradient-noise magnitude for [`run_noisy_sgd`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum NoiseModel {
    /// I.i.d. Gaussian entries with this standard deviation.
    Absolute(f64),
    /// Gaussian direction scaled so that its range-projected norm equals
    /// this multiple of `(c̃/2)·‖w̃ − w̃*‖`.
    RelativeToBound(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum LrSchedule {
    Constant(f64),
    /// `η_t = η0/√t`.
    InvSqrt(f64),
}

impl LrSchedule {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::InvSqrt(lr0) => lr0 / (t as f64).sqrt(),
        }
    }
}

/// One logged step. Losses are measured before the update of that step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub loss: f64,
    /// Left-hand side of the tracked inequality.
    pub lhs: f64,
    /// Right-hand side with `c̃`.
    pub rhs_c: f64,
    /// Right-hand side with `C`.
    pub rhs_big_c: f64,
    /// `Σ σ_q` over the step's reductions (0 for noisy SGD).
    pub sigma_q_sum: f64,
    /// Range-projected norm of the gradient error actually applied.
    pub grad_error: f64,
    /// Per-reduction `(σ_r, σ_q)` (empty for noisy SGD).
    pub sigma_log: Vec<SigmaTail>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    /// Loss after the final update.
    pub final_loss: f64,
}

impl Trajectory {
    pub fn initial_loss(&self) -> f64 {
        self.points.first().map_or(self.final_loss, |p| p.loss)
    }

    pub const CSV_HEADER: &'static str = "step,loss,lhs,rhs_c,rhs_C,sigma_q_sum";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for p in &self.points {
            let _ = writeln!(
                s,
                "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
                p.step, p.loss, p.lhs, p.rhs_c, p.rhs_big_c, p.sigma_q_sum
            );
        }
        s
    }
}

/// Gradient descent from `W = 0` with Gaussian noise added to the exact
/// batch gradient.
pub fn run_noisy_sgd(
    problem: &ConvexProblem,
    noise: NoiseModel,
    steps: usize,
    lr: LrSchedule,
    seed: u64,
) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_o, n_i) = (problem.n_o(), problem.n_i());
    let mut w = Array2::zeros((n_o, n_i));
    let mut points = Vec::with_capacity(steps);
    for t in 1..=steps {
        let dist = problem.range_distance(w.view());
        let g = problem.gradient(w.view());
        let mut eps: Array2<f64> = Array2::from_shape_simple_fn((n_o, n_i), || StandardNormal.sample(&mut rng));
        match noise {
            NoiseModel::Absolute(sigma) => eps *= sigma,
            NoiseModel::RelativeToBound(k) => {
                let target = k * 0.5 * problem.c_tilde * dist;
                let cur = problem.range_norm(eps.view());
                eps *= if cur > 0.0 { target / cur } else { 0.0 };
            }
        }
        let lhs = problem.range_norm(eps.view());
        points.push(TrajectoryPoint {
            step: t,
            loss: problem.loss(w.view()),
            lhs,
            rhs_c: 0.5 * problem.c_tilde * dist,
            rhs_big_c: 0.5 * problem.c_max * dist,
            sigma_q_sum: 0.0,
            grad_error: lhs,
            sigma_log: Vec::new(),
        });
        let step = lr.at(t);
        w.scaled_add(-step, &(g + eps));
    }
    Trajectory {
        final_loss: problem.loss(w.view()),
        points,
    }
}

/// Options for [`run_lrt_regression`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrtRegression {
    pub variant: Variant,
    pub rank: usize,
    pub steps: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    /// Optional weight grid; adds `N·Δ²/12` to the tracked left-hand side.
    pub weight_quant: Option<QuantSpec>,
}

/// Gradient descent where each step's gradient is the low-rank estimate
/// accumulated over the `B` columns as pairs `((W·xᵢ − yᵢ)/B, xᵢ)`.
pub fn run_lrt_regression(problem: &ConvexProblem, opts: &LrtRegression) -> Result<Trajectory> {
    let (n_o, n_i, b) = (problem.n_o(), problem.n_i(), problem.batch());
    let mut lrt = LowRankState::new(n_o, n_i, opts.rank, opts.variant, f64::INFINITY, opts.seed)?;
    let mut w = Array2::zeros((n_o, n_i));
    let quant_term = quant_noise_term(opts.weight_quant.as_ref(), n_o * n_i);
    let mut points = Vec::with_capacity(opts.steps);
    for t in 1..=opts.steps {
        let dist = problem.range_distance(w.view());
        let resid = problem.residual(w.view()) / b as f64;
        lrt.reset();
        let mut log = Vec::with_capacity(b);
        for i in 0..b {
            let out = lrt.update(resid.column(i), problem.x.column(i))?;
            if let Some(sigma) = out.sigma() {
                log.push(SigmaTail::from_spectrum(sigma));
            }
        }
        let g_est = lrt.estimate();
        let g = problem.gradient(w.view());
        let (lhs, scale) = match opts.variant {
            Variant::Biased => (log.iter().map(|t| t.sigma_q * t.sigma_q).sum::<f64>(), 0.25),
            Variant::Unbiased => (log.iter().map(|t| t.sigma_r * t.sigma_q).sum::<f64>(), 0.125),
        };
        points.push(TrajectoryPoint {
            step: t,
            loss: problem.loss(w.view()),
            lhs: lhs + quant_term,
            rhs_c: scale * problem.c_tilde.powi(2) * dist * dist,
            rhs_big_c: scale * problem.c_max.powi(2) * dist * dist,
            sigma_q_sum: log.iter().map(|t| t.sigma_q).sum(),
            grad_error: problem.range_norm((&g_est - &g).view()),
            sigma_log: log,
        });
        w.scaled_add(-opts.lr.at(t), &g_est);
        if let Some(q) = &opts.weight_quant {
            q.quantize_inplace(&mut w);
        }
    }
    Ok(Trajectory {
        final_loss: problem.loss(w.view()),
        points,
    })
}

/// `R(T) = Σ f(w_t) − T·f(w*)` over the logged pre-update losses.
pub fn regret(trajectory: &Trajectory, problem: &ConvexProblem) -> Result<f64> {
    if trajectory.points.is_empty() {
        return Err(ConvergenceError::Empty);
    }
    Ok(trajectory.points.iter().map(|p| p.loss - problem.loss_star).sum())
}

/// Running regret `R(1), …, R(T)`.
pub fn regret_curve(trajectory: &Trajectory, problem: &ConvexProblem) -> Vec<f64> {
    trajectory
        .points
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p.loss - problem.loss_star;
            Some(*acc)
        })
        .collect()
}

/// Quantization noise energy `N·Δ²/12` of a weight grid (0 when absent).
pub fn quant_noise_term(spec: Option<&QuantSpec>, n: usize) -> f64 {
    spec.map_or(0.0, |s| n as f64 * s.noise_variance())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_full_rank_has_positive_c() {
        let p = make_problem(1, 8, 8, 3).unwrap();
        assert!(p.c > 0.0);
        assert_eq!(p.c, p.c_tilde);
        assert!(p.c_max >= p.c);
    }

    #[test]
    fn wide_batch_is_rank_deficient() {
        let p = make_problem(2, 16, 6, 3).unwrap();
        assert_eq!(p.c, 0.0);
        assert!(p.c_tilde > 0.0);
        assert_eq!(p.eig.len(), 6);
    }

    #[test]
    fn tall_batch_uses_transpose() {
        let p = make_problem(3, 4, 9, 2).unwrap();
        assert_eq!(p.range.dim(), (4, 4));
        let g = p.gradient(p.w_star.view());
        assert!(g.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn rejects_empty_dims() {
        assert!(make_problem(0, 0, 3, 2).is_err());
    }

    #[test]
    fn regret_of_empty_trajectory_is_an_error() {
        let p = make_problem(1, 4, 4, 1).unwrap();
        assert!(regret(&Trajectory::default(), &p).is_err());
    }

    #[test]
    fn quant_noise_term_values() {
        assert_eq!(quant_noise_term(None, 100), 0.0);
        let q = QuantSpec::new(8, -1.0, 1.0).unwrap();
        let per = quant_noise_term(Some(&q), 1);
        assert!((per - (2.0f64 / 256.0).powi(2) / 12.0).abs() < 1e-18);
        assert!((quant_noise_term(Some(&q), 100) - 100.0 * per).abs() < 1e-15);
    }
}
