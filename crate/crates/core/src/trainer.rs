//! Sample-at-a-time online training with write accounting.
//!
//! Each step makes a prediction, scores it, then backpropagates according to
//! the [`TrainMode`]. In low-rank mode weight gradients are accumulated per
//! layer and only written to weight memory when an apply attempt reaches the
//! minimum update density; otherwise the effective batch keeps growing and
//! the learning rate grows with its square root.

use std::fmt::Write as _;

use ndarray::ArrayView3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::{
    softmax_cross_entropy, ApplyParams, BackwardCtx, Layer, LayerError, MaxNorm, Network, WeightRoute,
};
use crate::lowrank::{FactorStorage, LowRankState, Variant, DEFAULT_KAPPA_TH};

/// Decay of the online accuracy average.
pub const ACCURACY_EMA_DECAY: f64 = 0.999;

/// Number of steps over which drift magnitudes are specified.
pub const DRIFT_HORIZON: f64 = 1e6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Lrt(#[from] crate::lowrank::LrtError),
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("label {0} is out of range for {1} classes")]
    Label(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Predict only.
    Inference,
    /// Biases and batch-norm affine parameters only.
    BiasOnly,
    /// Quantized per-sample weight writes.
    Sgd,
    /// Low-rank accumulation with gated applies.
    #[default]
    Lrt,
}

/// How plain SGD counts convolution weight writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConvWriteCounting {
    /// Pixel gradients are summed in scratch and written once per sample.
    #[default]
    PerSample,
    /// Every output pixel's gradient is written as it is produced.
    PerPixel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpdatePolicy {
    pub mode: TrainMode,
    pub base_lr: f64,
    pub rho_min: f64,
    pub conv_batch: usize,
    pub fc_batch: usize,
    pub rank: usize,
    pub conv_variant: Variant,
    pub fc_variant: Variant,
    pub kappa_th: f64,
    /// Bit width of the low-rank factors (0 keeps them wide).
    pub factor_bits: u32,
    pub maxnorm: bool,
    pub train_bias: bool,
    pub conv_counting: ConvWriteCounting,
}

impl Default for UpdatePolicy {
    fn default() -> Self {
        Self {
            mode: TrainMode::Lrt,
            base_lr: 0.01,
            rho_min: 0.01,
            conv_batch: 10,
            fc_batch: 100,
            rank: 4,
            conv_variant: Variant::Biased,
            fc_variant: Variant::Unbiased,
            kappa_th: DEFAULT_KAPPA_TH,
            factor_bits: 16,
            maxnorm: true,
            train_bias: true,
            conv_counting: ConvWriteCounting::PerSample,
        }
    }
}

impl UpdatePolicy {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(TrainError::Policy(format!("base_lr must be non-negative, got {}", self.base_lr)));
        }
        if !(0.0..=1.0).contains(&self.rho_min) {
            return Err(TrainError::Policy(format!("rho_min must be in [0, 1], got {}", self.rho_min)));
        }
        if self.conv_batch == 0 || self.fc_batch == 0 {
            return Err(TrainError::Policy("batch sizes must be positive".into()));
        }
        if self.mode == TrainMode::Lrt && self.rank == 0 {
            return Err(TrainError::Policy("rank must be at least 1".into()));
        }
        if self.kappa_th.is_nan() || self.kappa_th <= 0.0 {
            return Err(TrainError::Policy(format!("kappa_th must be positive, got {}", self.kappa_th)));
        }
        Ok(())
    }

    pub fn storage(&self) -> FactorStorage {
        match self.factor_bits {
            0 => FactorStorage::Wide,
            bits => FactorStorage::Fixed { bits },
        }
    }

    /// Learning-rate multiplier `base_lr·√(B_eff/B)` for an update applied
    /// after `effective` samples of a layer with nominal batch `nominal`.
    /// The applied step is this rate times `√B` times the batch-mean
    /// gradient, i.e. `base_lr·Σ∇/√B_eff`.
    pub fn effective_lr(&self, nominal: usize, effective: u64) -> f64 {
        self.base_lr * (effective as f64 / nominal as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DriftKind {
    #[default]
    None,
    /// Additive Gaussian noise; `sigma0` is the accumulated deviation over
    /// the horizon.
    Analog { sigma0: f64 },
    /// Independent stored-bit flips; `p0` is the expected flips per bit over
    /// the horizon.
    Digital { p0: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftModel {
    pub kind: DriftKind,
    /// Steps between injections.
    pub period: u64,
}

impl Default for DriftModel {
    fn default() -> Self {
        Self {
            kind: DriftKind::None,
            period: 10,
        }
    }
}

impl DriftModel {
    pub fn analog(sigma0: f64, period: u64) -> Self {
        Self {
            kind: DriftKind::Analog { sigma0 },
            period,
        }
    }

    pub fn digital(p0: f64, period: u64) -> Self {
        Self {
            kind: DriftKind::Digital { p0 },
            period,
        }
    }

    fn injections(&self) -> f64 {
        DRIFT_HORIZON / self.period as f64
    }

    /// Per-injection standard deviation `σ0 / √(horizon/d)`.
    pub fn sigma(&self) -> f64 {
        match self.kind {
            DriftKind::Analog { sigma0 } => sigma0 / self.injections().sqrt(),
            _ => 0.0,
        }
    }

    /// Per-injection, per-bit flip probability `p0 / (horizon/d)`.
    pub fn flip_prob(&self) -> f64 {
        match self.kind {
            DriftKind::Digital { p0 } => (p0 / self.injections()).min(1.0),
            _ => 0.0,
        }
    }

    pub fn is_due(&self, step: u64) -> bool {
        !matches!(self.kind, DriftKind::None) && self.period > 0 && step > 0 && step % self.period == 0
    }
}

/// Perturbs every weight tensor of `net` once. Analog noise is clipped to
/// [−1, 1] and snapped back onto the weight grid; digital flips act on the
/// stored level index and need a quantized weight grid (no-op otherwise).
pub fn inject_drift<R: Rng + ?Sized>(net: &mut Network, drift: &DriftModel, rng: &mut R) {
    match drift.kind {
        DriftKind::None => {}
        DriftKind::Analog { .. } => {
            let sigma = drift.sigma();
            if sigma == 0.0 {
                return;
            }
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            for core in net.cores_mut() {
                let qw = core.quant.w;
                core.w.mapv_inplace(|w| qw.q((w + normal.sample(rng)).clamp(-1.0, 1.0)));
            }
        }
        DriftKind::Digital { .. } => {
            let p = drift.flip_prob();
            if p <= 0.0 {
                return;
            }
            let geo = Geometric::new(p).expect("probability in (0, 1]");
            for core in net.cores_mut() {
                let Some(spec) = core.quant.w.spec().copied() else {
                    continue;
                };
                let bits = spec.bits() as u64;
                let total = core.w.len() as u64 * bits;
                let data = core.w.as_slice_memory_order_mut().expect("owned weights");
                // Jump straight to the next flipped bit.
                let mut pos = geo.sample(rng);
                while pos < total {
                    let cell = (pos / bits) as usize;
                    let bit = (pos % bits) as u32;
                    let idx = spec.index_of(data[cell]) ^ (1 << bit);
                    data[cell] = spec.from_index(idx);
                    pos += 1 + geo.sample(rng);
                }
            }
        }
    }
}

/// Auxiliary (non-weight) memory of one weight layer, in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LayerMemory {
    pub n_o: usize,
    pub n_i: usize,
    pub rank: usize,
    /// Persistent low-rank state: `r` factor columns `r·(n_i + n_o)` plus
    /// the `r` weights `c_x`.
    pub lrt_state: usize,
    /// Per-step scratch: the incoming column pair `n_i + n_o` and the
    /// `q x q` core.
    pub lrt_step: usize,
    pub bias: usize,
    pub batch_norm: usize,
    pub maxnorm: usize,
    /// Weight memory `n_o·n_i` at the weight bit width.
    pub nvm_weights: usize,
}

impl LayerMemory {
    /// Memory owned by this layer outside the weight array.
    pub fn auxiliary(&self) -> usize {
        self.lrt_state + self.bias + self.batch_norm + self.maxnorm
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MemoryReport {
    pub layers: Vec<LayerMemory>,
}

impl MemoryReport {
    /// Layers are updated one after another, so a single step workspace
    /// sized for the largest layer serves the whole network.
    pub fn shared_workspace(&self) -> usize {
        self.layers.iter().map(|l| l.lrt_step).max().unwrap_or(0)
    }

    pub fn total_auxiliary(&self) -> usize {
        self.layers.iter().map(LayerMemory::auxiliary).sum::<usize>() + self.shared_workspace()
    }

    pub fn total_lrt(&self) -> usize {
        self.layers.iter().map(|l| l.lrt_state).sum::<usize>() + self.shared_workspace()
    }

    pub fn total_nvm(&self) -> usize {
        self.layers.iter().map(|l| l.nvm_weights).sum()
    }
}

fn bytes_for_bits(bits: u32) -> usize {
    (bits as usize).div_ceil(8)
}

/// Sizes the auxiliary state of every weight layer. Low-rank state is
/// counted at `aux_bits` per value; biases and batch-norm state at the bias
/// grid width (8 bytes when unquantized).
pub fn memory_report(net: &Network, aux_bits: u32) -> MemoryReport {
    let aux = bytes_for_bits(aux_bits);
    let layers = net
        .cores()
        .map(|core| {
            let (n_o, n_i) = (core.n_o(), core.n_i());
            let b_bytes = core.quant.b.spec().map_or(8, |s| bytes_for_bits(s.bits()));
            let w_bits = core.quant.w.spec().map_or(64, |s| s.bits()) as usize;
            let (bias, bn, mn) = core.aux_state_values();
            let (rank, state, step) = match &core.lrt {
                Some(l) => {
                    let (r, q) = (l.rank(), l.q());
                    (r, (r * (n_i + n_o) + r) * aux, (n_i + n_o + q * q) * aux)
                }
                None => (0, 0, 0),
            };
            LayerMemory {
                n_o,
                n_i,
                rank,
                lrt_state: state,
                lrt_step: step,
                bias: bias * b_bytes,
                batch_norm: bn * b_bytes,
                maxnorm: mn * 4,
                nvm_weights: (n_o * n_i * w_bits).div_ceil(8),
            }
        })
        .collect();
    MemoryReport { layers }
}

/// Per-step metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub label: usize,
    pub prediction: usize,
    pub loss: f64,
    /// Bias-corrected moving average of online accuracy.
    pub accuracy_ema: f64,
    /// Largest per-cell write-event count over all weight tensors.
    pub max_cell_writes: u64,
    /// Largest per-cell value-change count over all weight tensors.
    pub max_cell_changes: u32,
    /// Applied low-rank updates this step.
    pub applies: usize,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str =
        "step,label,prediction,correct,loss,accuracy_ema,max_cell_writes,max_cell_changes,applies";

    pub fn correct(&self) -> bool {
        self.label == self.prediction
    }

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{:.6},{:.6},{},{},{}",
            self.step,
            self.label,
            self.prediction,
            u8::from(self.correct()),
            self.loss,
            self.accuracy_ema,
            self.max_cell_writes,
            self.max_cell_changes,
            self.applies
        );
        s
    }
}

/// Online training loop over one network.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: Network,
    policy: UpdatePolicy,
    drift: DriftModel,
    drift_rng: ChaCha8Rng,
    step: u64,
    ema: f64,
    ema_weight: f64,
    applies: u64,
}

impl Trainer {
    /// Configures `net` for `policy`: attaches accumulators in low-rank mode,
    /// sets per-layer batch sizes and toggles max-norm.
    pub fn new(mut net: Network, policy: UpdatePolicy, drift: DriftModel, seed: u64) -> Result<Self, TrainError> {
        policy.validate()?;
        let mut seeder = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            let is_conv = layer.is_conv();
            let Some(core) = layer.core_mut() else {
                continue;
            };
            core.batch = if is_conv { policy.conv_batch } else { policy.fc_batch };
            core.maxnorm = policy.maxnorm.then(MaxNorm::default);
            core.lrt = if policy.mode == TrainMode::Lrt {
                let variant = if is_conv { policy.conv_variant } else { policy.fc_variant };
                Some(
                    LowRankState::new(core.n_o(), core.n_i(), policy.rank, variant, policy.kappa_th, seeder.random())?
                        .with_storage(policy.storage()),
                )
            } else {
                None
            };
        }
        Ok(Self {
            net,
            policy,
            drift,
            drift_rng: ChaCha8Rng::seed_from_u64(seeder.random()),
            step: 0,
            ema: 0.0,
            ema_weight: 0.0,
            applies: 0,
        })
    }

    pub fn policy(&self) -> &UpdatePolicy {
        &self.policy
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn total_applies(&self) -> u64 {
        self.applies
    }

    fn ctx(&self) -> BackwardCtx {
        let p = &self.policy;
        let weights = match p.mode {
            TrainMode::Inference | TrainMode::BiasOnly => WeightRoute::Frozen,
            TrainMode::Sgd => WeightRoute::Sgd {
                per_pixel: p.conv_counting == ConvWriteCounting::PerPixel,
            },
            TrainMode::Lrt => WeightRoute::Lrt,
        };
        BackwardCtx {
            lr: p.base_lr,
            train_bias: p.train_bias,
            train_bn: true,
            weights,
        }
    }

    /// One online step: predict, score, learn, then inject drift if due.
    pub fn train_step(&mut self, x: ArrayView3<f64>, label: usize) -> Result<StepRecord, TrainError> {
        let learning = self.policy.mode != TrainMode::Inference;
        let logits = self.net.forward(x, learning)?;
        if label >= logits.len() {
            return Err(TrainError::Label(label, logits.len()));
        }
        let (loss, d_logits, prediction) = softmax_cross_entropy(logits.view(), label);
        self.step += 1;
        self.ema = ACCURACY_EMA_DECAY * self.ema + (1.0 - ACCURACY_EMA_DECAY) * f64::from(u8::from(prediction == label));
        self.ema_weight = ACCURACY_EMA_DECAY * self.ema_weight + (1.0 - ACCURACY_EMA_DECAY);

        let mut applies = 0;
        if learning {
            let ctx = self.ctx();
            self.net.backward(d_logits.view(), &ctx)?;
            if self.policy.mode == TrainMode::Lrt {
                let params = ApplyParams {
                    base_lr: self.policy.base_lr,
                    rho_min: self.policy.rho_min,
                };
                applies = self.net.finish_sample(&params).iter().filter(|(_, e)| e.applied).count();
                self.applies += applies as u64;
            }
        }
        if self.drift.is_due(self.step) {
            inject_drift(&mut self.net, &self.drift, &mut self.drift_rng);
        }
        Ok(StepRecord {
            step: self.step,
            label,
            prediction,
            loss,
            accuracy_ema: self.ema / self.ema_weight,
            max_cell_writes: self.max_cell_writes(),
            max_cell_changes: self.net.cores().map(|c| c.writes.max_changes()).max().unwrap_or(0),
            applies,
        })
    }

    pub fn max_cell_writes(&self) -> u64 {
        self.net.cores().map(|c| c.writes.events()).max().unwrap_or(0)
    }

    /// Write events per cell, split into (convolution, dense) maxima.
    pub fn write_events_by_kind(&self) -> (u64, u64) {
        let mut conv = 0;
        let mut dense = 0;
        for layer in &self.net.layers {
            match layer {
                Layer::Conv(c) => conv = conv.max(c.core.writes.events()),
                Layer::Dense(d) => dense = dense.max(d.core.writes.events()),
                Layer::Pool(_) => {}
            }
        }
        (conv, dense)
    }

    pub fn memory_report(&self) -> MemoryReport {
        memory_report(&self.net, self.policy.factor_bits.max(16))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drift_magnitudes() {
        let a = DriftModel::analog(10.0, 10);
        assert!((a.sigma() - 0.031622776601683794).abs() < 1e-15);
        let d = DriftModel::digital(10.0, 10);
        assert!((d.flip_prob() - 1e-4).abs() < 1e-18);
        assert!(d.is_due(10) && !d.is_due(5) && !d.is_due(0));
        assert!(!DriftModel::default().is_due(10));
    }

    #[test]
    fn sqrt_learning_rate_scaling() {
        let p = UpdatePolicy::default();
        assert!((p.effective_lr(100, 200) - 0.01 * 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(p.effective_lr(100, 100), 0.01);
    }

    #[test]
    fn policy_validation() {
        let bad = UpdatePolicy {
            rho_min: 2.0,
            ..UpdatePolicy::default()
        };
        assert!(bad.validate().is_err());
        let bad = UpdatePolicy {
            conv_batch: 0,
            ..UpdatePolicy::default()
        };
        assert!(bad.validate().is_err());
        assert!(UpdatePolicy::default().validate().is_ok());
    }

    #[test]
    fn policy_toml_defaults() {
        let p: UpdatePolicy = toml::from_str("mode = \"sgd\"").unwrap();
        assert_eq!(p.mode, TrainMode::Sgd);
        assert_eq!(p.fc_batch, 100);
        assert!(toml::from_str::<UpdatePolicy>("bogus = 1").is_err());
    }
}
