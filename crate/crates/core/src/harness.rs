//! Experiment runner: TOML configs, online scenarios, ablations, the
//! rank/bitwidth sweep and the convergence lab, all emitting CSV.
//!
//! Every run is a pure function of its config and seed. Seeds and schemes
//! fan out over rayon; each run's inner loop is sequential and writes its
//! own file.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convergence::{
    make_problem, regret, run_lrt_regression, run_noisy_sgd, ConvergenceError, LrSchedule, LrtRegression,
    NoiseModel, Trajectory,
};
use crate::datagen::{
    load_idx, make_partitions, synthetic_digits, AugmentParams, DataError, Dataset, ElasticParams, OnlineStream,
    PartitionSizes, ShiftSchedule,
};
use crate::layers::{BnMode, LayerError, NetOptions, NetSpec, Network};
use crate::lowrank::Variant;
use crate::quant::{QuantProfile, QuantSpec, Quantizer};
use crate::trainer::{DriftModel, StepRecord, TrainError, TrainMode, Trainer, UpdatePolicy};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("parsing config")]
    Parse(#[from] toml::de::Error),
    #[error("serializing config")]
    Serialize(#[from] toml::ser::Error),
    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Convergence(#[from] ConvergenceError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn config_err(key: &str, message: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        key: key.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Same statistics online as offline.
    Control,
    /// Augmentation mix changes every block of the online stream.
    DistShift,
    /// Gaussian weight drift.
    DriftAnalog,
    /// Random stored-bit flips.
    DriftDigital,
    Convergence,
    Ablation,
    Sweep,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Control => "control",
            Scenario::DistShift => "dist_shift",
            Scenario::DriftAnalog => "drift_analog",
            Scenario::DriftDigital => "drift_digital",
            Scenario::Convergence => "convergence",
            Scenario::Ablation => "ablation",
            Scenario::Sweep => "sweep",
        }
    }

    pub fn is_online(&self) -> bool {
        matches!(
            self,
            Scenario::Control | Scenario::DistShift | Scenario::DriftAnalog | Scenario::DriftDigital
        )
    }
}

/// The five compared training schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Inference,
    BiasOnly,
    Sgd,
    Lrt,
    LrtMaxNorm,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Inference,
        Scheme::BiasOnly,
        Scheme::Sgd,
        Scheme::Lrt,
        Scheme::LrtMaxNorm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Inference => "inference",
            Scheme::BiasOnly => "bias_only",
            Scheme::Sgd => "sgd",
            Scheme::Lrt => "lrt",
            Scheme::LrtMaxNorm => "lrt_max_norm",
        }
    }

    /// `base` with the mode and max-norm switch of this scheme.
    pub fn policy(&self, base: &UpdatePolicy) -> UpdatePolicy {
        let (mode, maxnorm) = match self {
            Scheme::Inference => (TrainMode::Inference, false),
            Scheme::BiasOnly => (TrainMode::BiasOnly, false),
            Scheme::Sgd => (TrainMode::Sgd, false),
            Scheme::Lrt => (TrainMode::Lrt, false),
            Scheme::LrtMaxNorm => (TrainMode::Lrt, true),
        };
        UpdatePolicy { mode, maxnorm, ..*base }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Procedural digits; `count` defaults to the partition total.
    Synthetic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        count: Option<usize>,
    },
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub elastic: ElasticParams,
    pub augment: AugmentParams,
    /// Online samples per run; defaults to the partition size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub online_samples: Option<usize>,
    /// Explicit partition sizes, overriding the desk/full presets.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partitions: Option<PartitionSizes>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic { count: None },
            elastic: ElasticParams::default(),
            augment: AugmentParams::default(),
            online_samples: None,
            partitions: None,
        }
    }
}

/// Offline float training before deployment; `epochs = 0` skips it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 1, lr: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftConfig {
    pub analog_sigma0: f64,
    pub digital_p0: f64,
    pub period: u64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            analog_sigma0: 10.0,
            digital_p0: 10.0,
            period: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Samples trained from scratch per run.
    pub samples: usize,
    /// Accuracy is averaged over this many final samples.
    pub tail: usize,
    /// Alternative skip threshold compared against the policy's.
    pub kappa_alt: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            tail: 500,
            kappa_alt: 1e8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub ranks: Vec<usize>,
    pub weight_bits: Vec<u32>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ranks: vec![1, 2, 4, 8],
            weight_bits: vec![2, 3, 4, 6, 8],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    /// `[n_i, batch, n_o]`; defaults depend on the desk-scale switch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dims: Option<[usize; 3]>,
    pub steps: usize,
    pub rank: usize,
    /// Noise as a multiple of the tolerated gradient error.
    pub compliant_noise: f64,
    pub excess_noise: f64,
}

impl ConvergenceConfig {
    pub const DESK_DIMS: [usize; 3] = [256, 50, 64];
    pub const FULL_DIMS: [usize; 3] = [1024, 100, 256];
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            dims: None,
            steps: 50,
            rank: 10,
            compliant_noise: 0.5,
            excess_noise: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    /// Divides every data size by ten and uses the small convergence dims.
    pub desk_scale: bool,
    /// Runs without any quantization.
    pub float_mode: bool,
    pub schemes: Vec<Scheme>,
    pub batch_norm: bool,
    pub bn_mode: BnMode,
    pub policy: UpdatePolicy,
    pub net: NetSpec,
    pub quant: QuantProfile,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub drift: DriftConfig,
    pub ablation: AblationConfig,
    pub sweep: SweepConfig,
    pub convergence: ConvergenceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Control,
            seeds: (0..5).collect(),
            output: PathBuf::from("out"),
            desk_scale: true,
            float_mode: false,
            schemes: Scheme::ALL.to_vec(),
            batch_norm: true,
            bn_mode: BnMode::Streaming,
            policy: UpdatePolicy::default(),
            net: NetSpec::default(),
            quant: QuantProfile::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            drift: DriftConfig::default(),
            ablation: AblationConfig::default(),
            sweep: SweepConfig::default(),
            convergence: ConvergenceConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "at least one seed is required"));
        }
        if self.scenario.is_online() && self.schemes.is_empty() {
            return Err(config_err("schemes", "at least one scheme is required"));
        }
        self.policy
            .validate()
            .map_err(|e| config_err("policy", e.to_string()))?;
        if self.net.layers.is_empty() {
            return Err(config_err("net.layers", "the network has no layers"));
        }
        if self.net.input[2] != 1 {
            return Err(config_err("net.input", "digit images have a single channel"));
        }
        if !(self.pretrain.lr.is_finite() && self.pretrain.lr >= 0.0) {
            return Err(config_err("pretrain.lr", "must be a non-negative number"));
        }
        if let Some(p) = self.data.partitions {
            if p.train_source == 0 || p.val_source == 0 || p.online_source == 0 {
                return Err(config_err("data.partitions", "source splits must be non-empty"));
            }
        }
        if self.drift.period == 0 {
            return Err(config_err("drift.period", "must be positive"));
        }
        if self.ablation.tail == 0 || self.ablation.tail > self.ablation.samples {
            return Err(config_err("ablation.tail", "must be in 1..=ablation.samples"));
        }
        if self.sweep.ranks.iter().any(|&r| r == 0) {
            return Err(config_err("sweep.ranks", "ranks must be positive"));
        }
        if let Some(b) = self.sweep.weight_bits.iter().find(|&&b| b == 0 || b > 24) {
            return Err(config_err("sweep.weight_bits", format!("unsupported width {b}")));
        }
        let c = &self.convergence;
        if c.steps == 0 || c.rank == 0 {
            return Err(config_err("convergence", "steps and rank must be positive"));
        }
        if let Some([n_i, b, n_o]) = c.dims {
            if n_i == 0 || b == 0 || n_o == 0 {
                return Err(config_err("convergence.dims", "dimensions must be positive"));
            }
        }
        Ok(())
    }

    pub fn effective_quant(&self) -> QuantProfile {
        if self.float_mode {
            QuantProfile::float()
        } else {
            self.quant
        }
    }

    pub fn partition_sizes(&self) -> PartitionSizes {
        if let Some(p) = self.data.partitions {
            p
        } else if self.desk_scale {
            PartitionSizes::desk()
        } else {
            PartitionSizes::FULL
        }
    }

    pub fn online_samples(&self) -> usize {
        self.data.online_samples.unwrap_or(self.partition_sizes().online)
    }

    pub fn convergence_dims(&self) -> [usize; 3] {
        self.convergence.dims.unwrap_or(if self.desk_scale {
            ConvergenceConfig::DESK_DIMS
        } else {
            ConvergenceConfig::FULL_DIMS
        })
    }

    fn net_options(&self, quant: QuantProfile, bn_mode: BnMode) -> NetOptions {
        NetOptions {
            quant,
            batch_norm: self.batch_norm,
            bn_mode,
            maxnorm: false,
            lrt: None,
            conv_batch: self.policy.conv_batch,
            fc_batch: self.policy.fc_batch,
        }
    }
}

/// Mean and unbiased standard deviation (NaN below two values).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Source images for a config.
pub fn load_source(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    match &cfg.data.source {
        DataSource::Synthetic { count } => {
            let n = count.unwrap_or(cfg.partition_sizes().source_total());
            Ok(synthetic_digits(seed ^ 0x5eed_d161, n))
        }
        DataSource::Idx { images, labels } => Ok(load_idx(images, labels)?),
    }
}

/// Fraction of `data` classified correctly, without touching any state
/// other than the forward caches.
pub fn evaluate(net: &mut Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0usize;
    for i in 0..data.len() {
        let x = data.image(i).insert_axis(Axis(2));
        let logits = net.forward(x, false)?;
        let pred = logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (k, &v)| if v > b.1 { (k, v) } else { b })
            .0;
        correct += usize::from(pred == data.labels[i] as usize);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Profile used while pretraining: deployment activation and bias grids,
/// a 16-bit shadow of the weight grid and unquantized gradients.
pub fn pretrain_profile(deploy: &QuantProfile) -> QuantProfile {
    let w = deploy
        .w
        .spec()
        .map_or(Quantizer::IDENTITY, |s| {
            QuantSpec::new(PRETRAIN_WEIGHT_BITS.max(s.bits()), s.lo(), s.hi())
                .map_or(Quantizer::IDENTITY, Quantizer::from)
        });
    QuantProfile {
        w,
        g: Quantizer::IDENTITY,
        ..*deploy
    }
}

/// Width of the high-resolution weight copy kept during pretraining.
pub const PRETRAIN_WEIGHT_BITS: u32 = 16;

/// Quantization-aware SGD on the offline split, then a snap onto the
/// deployment grids. Returns the deployed network and its offline
/// validation accuracy.
pub fn pretrain(
    cfg: &ExperimentConfig,
    train: &Dataset,
    val: &Dataset,
    seed: u64,
) -> Result<(Network, f64)> {
    let deploy = cfg.effective_quant();
    let opts = cfg.net_options(pretrain_profile(&deploy), cfg.bn_mode);
    let mut net = Network::build(&cfg.net, &opts, seed)?;
    if cfg.pretrain.epochs > 0 && !train.is_empty() {
        let policy = UpdatePolicy {
            mode: TrainMode::Sgd,
            base_lr: cfg.pretrain.lr,
            maxnorm: false,
            ..cfg.policy
        };
        let mut trainer = Trainer::new(net, policy, DriftModel::default(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0ff1_11e);
        let mut order: Vec<usize> = (0..train.len()).collect();
        for _ in 0..cfg.pretrain.epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                trainer.train_step(train.image(i).insert_axis(Axis(2)), train.labels[i] as usize)?;
            }
        }
        net = trainer.net;
    }
    net.requantize(deploy);
    let acc = evaluate(&mut net, val)?;
    Ok((net, acc))
}

/// Outcome of one online run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub scheme: String,
    pub seed: u64,
    pub samples: usize,
    pub final_accuracy_ema: f64,
    pub tail_accuracy: f64,
    pub max_conv_writes: u64,
    pub max_dense_writes: u64,
    pub total_applies: u64,
    pub csv: Option<PathBuf>,
}

impl RunSummary {
    pub fn max_writes(&self) -> u64 {
        self.max_conv_writes.max(self.max_dense_writes)
    }
}

/// Trains `trainer` on `stream`, keeping the last `tail` outcomes for
/// accuracy and optionally collecting per-step CSV rows.
pub fn run_online(
    trainer: &mut Trainer,
    stream: OnlineStream<'_>,
    tail: usize,
    mut csv: Option<&mut String>,
) -> Result<(f64, f64, usize)> {
    let mut window: VecDeque<bool> = VecDeque::with_capacity(tail + 1);
    let mut last: Option<StepRecord> = None;
    let mut n = 0;
    if let Some(buf) = csv.as_deref_mut() {
        buf.push_str(StepRecord::CSV_HEADER);
        buf.push('\n');
    }
    for sample in stream {
        let rec = trainer.train_step(sample.image.view().insert_axis(Axis(2)), sample.label as usize)?;
        window.push_back(rec.correct());
        if window.len() > tail {
            window.pop_front();
        }
        if let Some(buf) = csv.as_deref_mut() {
            buf.push_str(&rec.csv_row());
            buf.push('\n');
        }
        last = Some(rec);
        n += 1;
    }
    let tail_acc = if window.is_empty() {
        f64::NAN
    } else {
        window.iter().filter(|&&c| c).count() as f64 / window.len() as f64
    };
    Ok((last.map_or(f64::NAN, |r| r.accuracy_ema), tail_acc, n))
}

fn drift_for(cfg: &ExperimentConfig) -> DriftModel {
    match cfg.scenario {
        Scenario::DriftAnalog => DriftModel::analog(cfg.drift.analog_sigma0, cfg.drift.period),
        Scenario::DriftDigital => DriftModel::digital(cfg.drift.digital_p0, cfg.drift.period),
        _ => DriftModel::default(),
    }
}

fn schedule_for(cfg: &ExperimentConfig) -> ShiftSchedule {
    match cfg.scenario {
        Scenario::DistShift => ShiftSchedule::distribution_shift((cfg.online_samples() / 10).max(1)),
        _ => ShiftSchedule::none(),
    }
}

/// Aggregate over seeds for one scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeSummary {
    pub scheme: String,
    pub runs: usize,
    pub accuracy_ema: (f64, f64),
    pub tail_accuracy: (f64, f64),
    pub max_writes: (f64, f64),
    pub offline_val_accuracy: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioReport {
    pub scenario: Scenario,
    pub runs: Vec<RunSummary>,
    pub summary: Vec<SchemeSummary>,
}

impl ScenarioReport {
    pub const SUMMARY_HEADER: &'static str = "scenario,scheme,runs,accuracy_ema_mean,accuracy_ema_sd,\
tail_accuracy_mean,tail_accuracy_sd,max_writes_mean,max_writes_sd,offline_val_mean,offline_val_sd";

    pub fn summary_csv(&self) -> String {
        let mut s = format!("{}\n", Self::SUMMARY_HEADER);
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.1},{:.1},{:.6},{:.6}",
                self.scenario.name(),
                r.scheme,
                r.runs,
                r.accuracy_ema.0,
                r.accuracy_ema.1,
                r.tail_accuracy.0,
                r.tail_accuracy.1,
                r.max_writes.0,
                r.max_writes.1,
                r.offline_val_accuracy.0,
                r.offline_val_accuracy.1
            );
        }
        s
    }
}

struct Prepared {
    seed: u64,
    net: Network,
    val_acc: f64,
    online: Dataset,
}

fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let source = load_source(cfg, seed)?;
    let parts = make_partitions(&source, cfg.partition_sizes(), cfg.data.elastic, seed)?;
    let (h, w) = parts.online_source.image_dims();
    if [h, w] != [cfg.net.input[0], cfg.net.input[1]] {
        return Err(config_err(
            "net.input",
            format!("network expects {:?} but images are {h}x{w}", cfg.net.input),
        ));
    }
    let (net, val_acc) = pretrain(cfg, &parts.train, &parts.val, seed)?;
    Ok(Prepared {
        seed,
        net,
        val_acc,
        online: parts.online_source,
    })
}

/// One of the four online scenarios: offline pretraining per seed, then
/// every configured scheme on the same online sequence.
pub fn run_scenario(cfg: &ExperimentConfig) -> Result<ScenarioReport> {
    cfg.validate()?;
    if !cfg.scenario.is_online() {
        return Err(config_err(
            "scenario",
            format!("`{}` is not an online scenario", cfg.scenario.name()),
        ));
    }
    let prepared: Vec<Prepared> = cfg.seeds.par_iter().map(|&s| prepare(cfg, s)).collect::<Result<_>>()?;
    let jobs: Vec<(&Prepared, Scheme)> = prepared
        .iter()
        .flat_map(|p| cfg.schemes.iter().map(move |&s| (p, s)))
        .collect();
    let drift = drift_for(cfg);
    let schedule = schedule_for(cfg);
    let samples = cfg.online_samples();
    let runs: Vec<RunSummary> = jobs
        .par_iter()
        .map(|&(p, scheme)| {
            let mut trainer = Trainer::new(p.net.clone(), scheme.policy(&cfg.policy), drift, p.seed)?;
            let stream = OnlineStream::new(&p.online, samples, schedule.clone(), cfg.data.augment, p.seed)?;
            let mut buf = String::new();
            let (ema, tail, n) = run_online(&mut trainer, stream, cfg.ablation.tail, Some(&mut buf))?;
            let path = cfg
                .output
                .join(format!("{}_{}_seed{}.csv", cfg.scenario.name(), scheme.name(), p.seed));
            write_file(&path, &buf)?;
            let (conv, dense) = trainer.write_events_by_kind();
            Ok(RunSummary {
                scheme: scheme.name().into(),
                seed: p.seed,
                samples: n,
                final_accuracy_ema: ema,
                tail_accuracy: tail,
                max_conv_writes: conv,
                max_dense_writes: dense,
                total_applies: trainer.total_applies(),
                csv: Some(path),
            })
        })
        .collect::<Result<_>>()?;
    let val: Vec<f64> = prepared.iter().map(|p| p.val_acc).collect();
    let summary = cfg
        .schemes
        .iter()
        .map(|s| {
            let mine: Vec<&RunSummary> = runs.iter().filter(|r| r.scheme == s.name()).collect();
            let col = |f: fn(&RunSummary) -> f64| mean_sd(&mine.iter().map(|r| f(r)).collect::<Vec<_>>());
            SchemeSummary {
                scheme: s.name().into(),
                runs: mine.len(),
                accuracy_ema: col(|r| r.final_accuracy_ema),
                tail_accuracy: col(|r| r.tail_accuracy),
                max_writes: col(|r| r.max_writes() as f64),
                offline_val_accuracy: mean_sd(&val),
            }
        })
        .collect();
    let report = ScenarioReport {
        scenario: cfg.scenario,
        runs,
        summary,
    };
    write_file(
        &cfg.output.join(format!("{}_summary.csv", cfg.scenario.name())),
        &report.summary_csv(),
    )?;
    Ok(report)
}

/// Trains a freshly initialized network on an un-augmented stream and
/// returns last-`tail` accuracy.
/// Trains a freshly initialised network online on `online` and returns the
/// accuracy over the last `ablation.tail` samples.
pub fn scratch_accuracy(
    cfg: &ExperimentConfig,
    online: &Dataset,
    policy: UpdatePolicy,
    quant: QuantProfile,
    bn_mode: BnMode,
    seed: u64,
) -> Result<f64> {
    let net = Network::build(&cfg.net, &cfg.net_options(quant, bn_mode), seed)?;
    let mut trainer = Trainer::new(net, policy, DriftModel::default(), seed)?;
    let stream = OnlineStream::new(
        online,
        cfg.ablation.samples,
        ShiftSchedule::none(),
        cfg.data.augment,
        seed,
    )?;
    Ok(run_online(&mut trainer, stream, cfg.ablation.tail, None)?.1)
}

/// Online source partition used by from-scratch runs.
pub fn scratch_source(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    let source = load_source(cfg, seed)?;
    Ok(make_partitions(&source, cfg.partition_sizes(), cfg.data.elastic, seed)?.online_source)
}

/// One ablation condition at one max-norm setting.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub group: &'static str,
    pub condition: String,
    pub conv_variant: Variant,
    pub fc_variant: Variant,
    pub kappa_th: f64,
    pub maxnorm: bool,
    pub accuracies: Vec<f64>,
}

impl AblationRow {
    pub fn mean_sd(&self) -> (f64, f64) {
        mean_sd(&self.accuracies)
    }
}

#[derive(Debug, Clone)]
struct AblationCase {
    group: &'static str,
    condition: String,
    policy: UpdatePolicy,
    bn_mode: BnMode,
}

fn ablation_cases(cfg: &ExperimentConfig) -> Vec<AblationCase> {
    let base = UpdatePolicy {
        mode: TrainMode::Lrt,
        ..cfg.policy
    };
    let case = |group, condition: &str, policy, bn_mode| AblationCase {
        group,
        condition: condition.into(),
        policy,
        bn_mode,
    };
    let kappa_alt = cfg.ablation.kappa_alt;
    let mut cases = vec![
        case("misc", "baseline", base, cfg.bn_mode),
        case(
            "misc",
            "bias_only",
            UpdatePolicy {
                mode: TrainMode::BiasOnly,
                ..base
            },
            cfg.bn_mode,
        ),
        case("misc", "no_streaming_bn", base, BnMode::PlainAverage),
        case(
            "misc",
            "no_bias_training",
            UpdatePolicy {
                train_bias: false,
                ..base
            },
            cfg.bn_mode,
        ),
        case(
            "misc",
            &format!("kappa_th_{kappa_alt:e}"),
            UpdatePolicy {
                kappa_th: kappa_alt,
                ..base
            },
            cfg.bn_mode,
        ),
    ];
    for conv in [Variant::Biased, Variant::Unbiased] {
        for fc in [Variant::Biased, Variant::Unbiased] {
            cases.push(case(
                "variant",
                &format!("conv_{}_fc_{}", variant_name(conv), variant_name(fc)),
                UpdatePolicy {
                    conv_variant: conv,
                    fc_variant: fc,
                    ..base
                },
                cfg.bn_mode,
            ));
        }
    }
    cases
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Biased => "biased",
        Variant::Unbiased => "unbiased",
    }
}

pub const ABLATION_HEADER: &str =
    "group,condition,conv_variant,fc_variant,kappa_th,maxnorm,runs,accuracy_mean,accuracy_sd";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let (m, sd) = r.mean_sd();
        let _ = writeln!(
            s,
            "{},{},{},{},{:e},{},{},{:.6},{:.6}",
            r.group,
            r.condition,
            variant_name(r.conv_variant),
            variant_name(r.fc_variant),
            r.kappa_th,
            r.maxnorm,
            r.accuracies.len(),
            m,
            sd
        );
    }
    s
}

/// Ablation grid, each condition with and without max-norm, trained from
/// scratch. Writes `ablation.csv`.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let quant = cfg.effective_quant();
    let sources: Vec<(u64, Dataset)> = cfg
        .seeds
        .par_iter()
        .map(|&s| Ok((s, scratch_source(cfg, s)?)))
        .collect::<Result<_>>()?;
    let mut specs = Vec::new();
    for c in ablation_cases(cfg) {
        for maxnorm in [false, true] {
            specs.push((c.clone(), maxnorm));
        }
    }
    let jobs: Vec<(usize, &(u64, Dataset))> = (0..specs.len())
        .flat_map(|i| sources.iter().map(move |s| (i, s)))
        .collect();
    let accs: Vec<(usize, f64)> = jobs
        .par_iter()
        .map(|&(i, (seed, online))| {
            let (c, maxnorm) = &specs[i];
            let policy = UpdatePolicy {
                maxnorm: *maxnorm,
                ..c.policy
            };
            Ok((i, scratch_accuracy(cfg, online, policy, quant, c.bn_mode, *seed)?))
        })
        .collect::<Result<_>>()?;
    let rows: Vec<AblationRow> = specs
        .iter()
        .enumerate()
        .map(|(i, (c, maxnorm))| AblationRow {
            group: c.group,
            condition: c.condition.clone(),
            conv_variant: c.policy.conv_variant,
            fc_variant: c.policy.fc_variant,
            kappa_th: c.policy.kappa_th,
            maxnorm: *maxnorm,
            accuracies: accs.iter().filter(|(j, _)| *j == i).map(|&(_, a)| a).collect(),
        })
        .collect();
    write_file(&cfg.output.join("ablation.csv"), &ablation_csv(&rows))?;
    Ok(rows)
}

/// Accuracy over the rank x weight-bitwidth grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub ranks: Vec<usize>,
    pub weight_bits: Vec<u32>,
    /// `[rank][bits]` per-seed accuracies.
    pub cells: Vec<Vec<Vec<f64>>>,
}

impl SweepReport {
    /// Mean accuracy with ranks as rows and bit widths as columns.
    pub fn matrix_csv(&self) -> String {
        let mut s = String::from("rank");
        for b in &self.weight_bits {
            let _ = write!(s, ",bits_{b}");
        }
        s.push('\n');
        for (r, row) in self.ranks.iter().zip(&self.cells) {
            let _ = write!(s, "{r}");
            for cell in row {
                let _ = write!(s, ",{:.6}", mean_sd(cell).0);
            }
            s.push('\n');
        }
        s
    }

    pub fn long_csv(&self) -> String {
        let mut s = String::from("rank,bits,runs,accuracy_mean,accuracy_sd\n");
        for (r, row) in self.ranks.iter().zip(&self.cells) {
            for (b, cell) in self.weight_bits.iter().zip(row) {
                let (m, sd) = mean_sd(cell);
                let _ = writeln!(s, "{r},{b},{},{m:.6},{sd:.6}", cell.len());
            }
        }
        s
    }
}

/// Low-rank training with max-norm across ranks and weight bit widths.
/// Writes `sweep_matrix.csv` and `sweep.csv`.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let sources: Vec<(u64, Dataset)> = cfg
        .seeds
        .par_iter()
        .map(|&s| Ok((s, scratch_source(cfg, s)?)))
        .collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for (ri, &rank) in cfg.sweep.ranks.iter().enumerate() {
        for (bi, &bits) in cfg.sweep.weight_bits.iter().enumerate() {
            for src in &sources {
                jobs.push((ri, bi, rank, bits, src));
            }
        }
    }
    let base = cfg.effective_quant();
    let results: Vec<(usize, usize, f64)> = jobs
        .par_iter()
        .map(|&(ri, bi, rank, bits, (seed, online))| {
            let quant = base
                .with_weight_bits(bits)
                .map_err(|e| config_err("sweep.weight_bits", e.to_string()))?;
            let policy = UpdatePolicy {
                mode: TrainMode::Lrt,
                maxnorm: true,
                rank,
                ..cfg.policy
            };
            Ok((ri, bi, scratch_accuracy(cfg, online, policy, quant, cfg.bn_mode, *seed)?))
        })
        .collect::<Result<_>>()?;
    let mut cells = vec![vec![Vec::new(); cfg.sweep.weight_bits.len()]; cfg.sweep.ranks.len()];
    for (ri, bi, acc) in results {
        cells[ri][bi].push(acc);
    }
    let report = SweepReport {
        ranks: cfg.sweep.ranks.clone(),
        weight_bits: cfg.sweep.weight_bits.clone(),
        cells,
    };
    write_file(&cfg.output.join("sweep_matrix.csv"), &report.matrix_csv())?;
    write_file(&cfg.output.join("sweep.csv"), &report.long_csv())?;
    Ok(report)
}

/// One convergence trajectory and its headline numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRun {
    pub name: &'static str,
    pub seed: u64,
    pub trajectory: Trajectory,
    pub regret: f64,
}

impl ConvergenceRun {
    pub fn loss_ratio(&self) -> f64 {
        self.trajectory.final_loss / self.trajectory.initial_loss()
    }
}

/// Noisy-gradient and low-rank regression trajectories per seed. Writes one
/// CSV per trajectory and `convergence_summary.csv`.
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<Vec<ConvergenceRun>> {
    cfg.validate()?;
    let [n_i, b, n_o] = cfg.convergence_dims();
    let cc = cfg.convergence;
    let runs: Vec<Vec<ConvergenceRun>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let problem = make_problem(seed, n_i, b, n_o)?;
            let lr = LrSchedule::Constant(1.0 / problem.c_max);
            let mut out = Vec::new();
            for (name, k) in [("noise_compliant", cc.compliant_noise), ("noise_excess", cc.excess_noise)] {
                let t = run_noisy_sgd(&problem, NoiseModel::RelativeToBound(k), cc.steps, lr, seed);
                out.push((name, t));
            }
            for (name, variant) in [("lrt_biased", Variant::Biased), ("lrt_unbiased", Variant::Unbiased)] {
                let opts = LrtRegression {
                    variant,
                    rank: cc.rank,
                    steps: cc.steps,
                    lr,
                    seed,
                    weight_quant: None,
                };
                out.push((name, run_lrt_regression(&problem, &opts)?));
            }
            out.into_iter()
                .map(|(name, trajectory)| {
                    Ok(ConvergenceRun {
                        name,
                        seed,
                        regret: regret(&trajectory, &problem)?,
                        trajectory,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let runs: Vec<ConvergenceRun> = runs.into_iter().flatten().collect();
    let mut summary = String::from("name,seed,initial_loss,final_loss,loss_ratio,regret\n");
    for r in &runs {
        write_file(
            &cfg.output.join(format!("convergence_{}_seed{}.csv", r.name, r.seed)),
            &r.trajectory.to_csv(),
        )?;
        let _ = writeln!(
            summary,
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e}",
            r.name,
            r.seed,
            r.trajectory.initial_loss(),
            r.trajectory.final_loss,
            r.loss_ratio(),
            r.regret
        );
    }
    write_file(&cfg.output.join("convergence_summary.csv"), &summary)?;
    Ok(runs)
}

/// What a dispatched run produced.
#[derive(Debug, Clone)]
pub enum Outcome {
    Scenario(ScenarioReport),
    Ablation(Vec<AblationRow>),
    Sweep(SweepReport),
    Convergence(Vec<ConvergenceRun>),
}

/// Runs whatever `cfg.scenario` names.
pub fn run(cfg: &ExperimentConfig) -> Result<Outcome> {
    Ok(match cfg.scenario {
        Scenario::Ablation => Outcome::Ablation(run_ablation(cfg)?),
        Scenario::Sweep => Outcome::Sweep(run_sweep(cfg)?),
        Scenario::Convergence => Outcome::Convergence(run_convergence(cfg)?),
        _ => Outcome::Scenario(run_scenario(cfg)?),
    })
}
