//! Streaming rank-`r` accumulation of outer-product sums.
//!
//! [`LowRankState`] keeps an approximation `L̃ R̃ᵀ ≈ Σ dzᵢ aᵢᵀ` using only
//! `q = r + 1` columns per side. Every incoming pair is orthogonalised into
//! the stored bases with modified Gram-Schmidt, the resulting `q x q` core is
//! diagonalised, and its spectrum is reduced back to rank `r` either by
//! truncation ([`Variant::Biased`]) or by the minimum-variance unbiased sign
//! mixing of the tail ([`Variant::Unbiased`]).
//!
//! The factors are never formed explicitly between samples: the state holds
//! orthonormal `Q_L`, `Q_R` and diagonal weights `c_x`, and
//! [`LowRankState::materialize`] returns `L̃ = Q_L diag(√c_x)` and
//! `R̃ = Q_R diag(√c_x)` restricted to the first `r` columns.
//!
//! # Checkpoint format
//!
//! [`LowRankState::to_bytes`] writes a flat little-endian record:
//!
//! | field | type |
//! |---|---|
//! | magic `b"LRT1"` | 4 bytes |
//! | `n_o`, `n_i`, `r` | `u32` each |
//! | variant (0 biased, 1 unbiased) | `u8` |
//! | storage (0 wide, 1 fixed) then bits | `u8`, `u32` |
//! | `kappa_th` | `f64` |
//! | samples seen, folded, skipped | `u64` each |
//! | rng seed, rng word position | `u64`, `u128` |
//! | `Q_L` row-major (`n_o x q`) | `f64` |
//! | `Q_R` row-major (`n_i x q`) | `f64` |
//! | `c_x` (`q`) | `f64` |

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    block_diag_identity, condition_estimate, householder_basis, mgs_insert, svd_small,
    LinalgError, OrthoBasis, SmallSvd,
};

/// Singular values below this fraction of the largest are treated as exact
/// zeros before the spectrum is split.
pub const SIGMA_ZERO_REL: f64 = 1e-12;

/// Default skip threshold for the diagonal condition estimate.
pub const DEFAULT_KAPPA_TH: f64 = 100.0;

const MAGIC: &[u8; 4] = b"LRT1";

#[derive(Debug, Error)]
pub enum LrtError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{what} has length {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("singular values must be non-negative and sorted descending")]
    UnsortedSpectrum,
    #[error("sigma log is empty")]
    EmptyLog,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, LrtError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Keep the top `r` singular components.
    #[default]
    Biased,
    /// Minimum-variance unbiased mixing of the smallest components.
    Unbiased,
}

/// Numeric format of the materialised factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FactorStorage {
    #[default]
    Wide,
    /// Symmetric fixed-point grid whose range is the max-abs of each factor.
    Fixed { bits: u32 },
}

impl FactorStorage {
    pub fn bytes_per_value(&self) -> usize {
        match self {
            FactorStorage::Wide => 8,
            FactorStorage::Fixed { bits } => (*bits as usize).div_ceil(8),
        }
    }
}

/// Quantises `m` in place onto a symmetric grid spanning its max-abs value.
pub fn quantize_max_abs(m: &mut Array2<f64>, bits: u32) {
    let max = m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    if max == 0.0 || bits < 2 {
        return;
    }
    let levels = ((1u64 << (bits - 1)) - 1) as f64;
    let step = max / levels;
    m.mapv_inplace(|x| (x / step).round_ties_even() * step);
}

/// Partition of a descending spectrum into kept values and a mixed tail.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSplit {
    /// The full spectrum that was split.
    pub sigma: Array1<f64>,
    /// Number of leading values kept verbatim (`m - 1`).
    pub kept: usize,
    /// Mixed tail length minus one.
    pub k: usize,
    /// Sum of the mixed tail.
    pub s1: f64,
    /// Unit vector whose complement carries the mixed tail.
    pub x0: Array1<f64>,
}

impl SigmaSplit {
    /// One-based index of the first mixed value.
    pub fn m(&self) -> usize {
        self.kept + 1
    }

    /// True when the mixed tail is entirely zero and needs no mixing.
    pub fn is_degenerate(&self) -> bool {
        self.s1 == 0.0
    }

    /// Number of random signs consumed by the unbiased reduction.
    pub fn sign_len(&self) -> usize {
        self.k + 1
    }

    /// Minimum achievable variance `s1²/k − s2` of the unbiased reduction.
    pub fn min_variance(&self) -> f64 {
        let tail = self.sigma.slice(s![self.kept..]);
        let s2: f64 = tail.iter().map(|x| x * x).sum();
        self.s1 * self.s1 / self.k as f64 - s2
    }
}

/// Finds the smallest `m` with `(q − m)·σ_m ≤ Σ_{j ≥ m} σ_j` and builds the
/// mixing vector for the tail `σ_m..σ_q`.
pub fn sigma_split(sigma: ArrayView1<f64>) -> Result<SigmaSplit> {
    let q = sigma.len();
    if q < 2 {
        return Err(LrtError::DimensionMismatch {
            what: "spectrum",
            expected: 2,
            got: q,
        });
    }
    if sigma.iter().any(|&x| !(x >= 0.0) || !x.is_finite())
        || sigma.windows(2).into_iter().any(|w| w[0] < w[1])
    {
        return Err(LrtError::UnsortedSpectrum);
    }
    // suffix[i] = Σ_{j ≥ i} σ_j
    let mut suffix = vec![0.0; q + 1];
    for i in (0..q).rev() {
        suffix[i] = suffix[i + 1] + sigma[i];
    }
    // zero-based i corresponds to one-based i + 1, so (q − (i+1))·σ_i.
    let kept = (0..q)
        .find(|&i| ((q - i - 1) as f64) * sigma[i] <= suffix[i])
        .expect("the last index always satisfies the split condition");
    let k = q - kept - 1;
    let s1 = suffix[kept];
    let mut x0 = Array1::zeros(k + 1);
    if s1 == 0.0 {
        x0[0] = 1.0;
    } else {
        for (dst, &sv) in x0.iter_mut().zip(sigma.slice(s![kept..]).iter()) {
            *dst = (1.0 - sv * k as f64 / s1).max(0.0).sqrt();
        }
        // Renormalise away rounding so the reflector sees an exact unit vector.
        let n = crate::linalg::norm(x0.view());
        x0 /= n;
    }
    Ok(SigmaSplit {
        sigma: sigma.to_owned(),
        kept,
        k,
        s1,
        x0,
    })
}

/// Builds the `q x r` mixing matrix and new weights for a split using the
/// supplied signs (each ±1). Biased reductions ignore `signs`.
pub fn apply_split_with_signs(
    split: &SigmaSplit,
    variant: Variant,
    signs: &[f64],
) -> Result<(Array2<f64>, Array1<f64>)> {
    let q = split.sigma.len();
    let r = q - 1;
    match variant {
        Variant::Biased => {
            let q_x = Array2::eye(q).slice(s![.., ..r]).to_owned();
            let c = split.sigma.slice(s![..r]).to_owned();
            Ok((q_x, c))
        }
        Variant::Unbiased => {
            if signs.len() != split.sign_len() {
                return Err(LrtError::DimensionMismatch {
                    what: "sign vector",
                    expected: split.sign_len(),
                    got: signs.len(),
                });
            }
            let mut x = householder_basis(split.x0.view())?;
            for (mut row, &s) in x.axis_iter_mut(Axis(0)).zip(signs) {
                row *= s;
            }
            let q_x = block_diag_identity(split.kept, x.view());
            let mut c = Array1::zeros(r);
            c.slice_mut(s![..split.kept])
                .assign(&split.sigma.slice(s![..split.kept]));
            let tail = if split.is_degenerate() {
                0.0
            } else {
                split.s1 / split.k as f64
            };
            c.slice_mut(s![split.kept..]).fill(tail);
            Ok((q_x, c))
        }
    }
}

pub fn draw_signs<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

/// Draws fresh signs from `rng` and applies the split.
pub fn apply_split<R: Rng + ?Sized>(
    split: &SigmaSplit,
    variant: Variant,
    rng: &mut R,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let signs = match variant {
        Variant::Biased => Vec::new(),
        Variant::Unbiased => draw_signs(rng, split.sign_len()),
    };
    apply_split_with_signs(split, variant, &signs)
}

/// Prepared reduction for one incoming pair, before signs are chosen.
#[derive(Debug, Clone)]
pub struct StepPlan {
    kind: PlanKind,
}

#[derive(Debug, Clone)]
enum PlanKind {
    Skip {
        kappa: f64,
    },
    Fold {
        new_left: Array1<f64>,
        new_right: Array1<f64>,
        svd: SmallSvd,
        split: SigmaSplit,
    },
}

impl StepPlan {
    pub fn is_skip(&self) -> bool {
        matches!(self.kind, PlanKind::Skip { .. })
    }

    /// Signs required by [`LowRankState::commit`] for an unbiased state.
    pub fn sign_len(&self) -> usize {
        match &self.kind {
            PlanKind::Skip { .. } => 0,
            PlanKind::Fold { split, .. } => split.sign_len(),
        }
    }

    pub fn split(&self) -> Option<&SigmaSplit> {
        match &self.kind {
            PlanKind::Skip { .. } => None,
            PlanKind::Fold { split, .. } => Some(split),
        }
    }
}

/// What happened to one pushed pair.
#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    /// The pair was folded in; `sigma` is the rank-`q` spectrum before reduction.
    Folded { sigma: Array1<f64> },
    /// Dropped because the diagonal condition estimate exceeded the threshold.
    Skipped { kappa: f64 },
}

impl StepOutcome {
    pub fn sigma(&self) -> Option<&Array1<f64>> {
        match self {
            StepOutcome::Folded { sigma } => Some(sigma),
            StepOutcome::Skipped { .. } => None,
        }
    }
}

/// Streaming low-rank accumulator for one weight matrix.
#[derive(Debug, Clone)]
pub struct LowRankState {
    q_l: OrthoBasis,
    q_r: OrthoBasis,
    c_x: Array1<f64>,
    rank: usize,
    variant: Variant,
    kappa_th: f64,
    storage: FactorStorage,
    samples_seen: u64,
    samples_folded: u64,
    samples_skipped: u64,
    seed: u64,
    rng: ChaCha8Rng,
}

impl LowRankState {
    pub fn new(
        n_o: usize,
        n_i: usize,
        rank: usize,
        variant: Variant,
        kappa_th: f64,
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(LrtError::InvalidConfig("rank must be at least 1".into()));
        }
        if n_o == 0 || n_i == 0 {
            return Err(LrtError::InvalidConfig(format!(
                "dimensions must be positive, got {n_o}x{n_i}"
            )));
        }
        if kappa_th.is_nan() || kappa_th <= 0.0 {
            return Err(LrtError::InvalidConfig(format!(
                "kappa_th must be positive, got {kappa_th}"
            )));
        }
        let q = rank + 1;
        Ok(Self {
            q_l: OrthoBasis::zeros(n_o, q),
            q_r: OrthoBasis::zeros(n_i, q),
            c_x: Array1::zeros(q),
            rank,
            variant,
            kappa_th,
            storage: FactorStorage::Wide,
            samples_seen: 0,
            samples_folded: 0,
            samples_skipped: 0,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn with_storage(mut self, storage: FactorStorage) -> Self {
        self.storage = storage;
        self
    }

    pub fn n_o(&self) -> usize {
        self.q_l.n()
    }

    pub fn n_i(&self) -> usize {
        self.q_r.n()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn q(&self) -> usize {
        self.rank + 1
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn kappa_th(&self) -> f64 {
        self.kappa_th
    }

    pub fn storage(&self) -> FactorStorage {
        self.storage
    }

    pub fn samples_seen(&self) -> u64 {
        self.samples_seen
    }

    pub fn samples_folded(&self) -> u64 {
        self.samples_folded
    }

    pub fn samples_skipped(&self) -> u64 {
        self.samples_skipped
    }

    pub fn left_basis(&self) -> &OrthoBasis {
        &self.q_l
    }

    pub fn right_basis(&self) -> &OrthoBasis {
        &self.q_r
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.c_x
    }

    /// Number of scalars held between samples: both bases, the weights and
    /// the `q x q` core scratch.
    pub fn footprint_values(&self) -> usize {
        let q = self.q();
        q * (self.n_o() + self.n_i()) + q + q * q
    }

    fn check_inputs(&self, dz: ArrayView1<f64>, a: ArrayView1<f64>) -> Result<()> {
        if dz.len() != self.n_o() {
            return Err(LrtError::DimensionMismatch {
                what: "dz",
                expected: self.n_o(),
                got: dz.len(),
            });
        }
        if a.len() != self.n_i() {
            return Err(LrtError::DimensionMismatch {
                what: "a",
                expected: self.n_i(),
                got: a.len(),
            });
        }
        if dz.iter().chain(a.iter()).any(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite.into());
        }
        Ok(())
    }

    /// Orthogonalises the pair into the current bases, diagonalises the
    /// core and splits its spectrum. Does not modify the state.
    pub fn plan(&self, dz: ArrayView1<f64>, a: ArrayView1<f64>) -> Result<StepPlan> {
        self.check_inputs(dz, a)?;
        let r = self.rank;
        let q = self.q();
        let left = mgs_insert(self.q_l.columns().slice(s![.., ..r]), dz)?;
        let right = mgs_insert(self.q_r.columns().slice(s![.., ..r]), a)?;

        let mut c_l = Array1::zeros(q);
        c_l.slice_mut(s![..r]).assign(&left.coeffs);
        c_l[r] = left.residual_norm;
        let mut c_r = Array1::zeros(q);
        c_r.slice_mut(s![..r]).assign(&right.coeffs);
        c_r[r] = right.residual_norm;

        let mut core = Array2::zeros((q, q));
        for i in 0..q {
            for j in 0..q {
                core[[i, j]] = c_l[i] * c_r[j];
            }
        }
        // Slot q is the fresh residual; its stored weight is always zero.
        for i in 0..r {
            core[[i, i]] += self.c_x[i];
        }

        let kappa = condition_estimate(core.view())?;
        // A zero last diagonal means one residual vanished, so the core has
        // rank <= r and folding is lossless; only skip genuinely new mass.
        if kappa > self.kappa_th && core[[r, r]] != 0.0 {
            return Ok(StepPlan {
                kind: PlanKind::Skip { kappa },
            });
        }

        let mut svd = svd_small(core.view())?;
        let top = svd.sigma[0];
        svd.sigma.mapv_inplace(|x| if x <= SIGMA_ZERO_REL * top { 0.0 } else { x });
        let split = sigma_split(svd.sigma.view())?;
        Ok(StepPlan {
            kind: PlanKind::Fold {
                new_left: left.new_column,
                new_right: right.new_column,
                svd,
                split,
            },
        })
    }

    /// Applies a plan produced by [`plan`](Self::plan) on this exact state,
    /// using explicit signs for the unbiased mixing.
    pub fn commit(&mut self, plan: &StepPlan, signs: &[f64]) -> Result<StepOutcome> {
        self.samples_seen += 1;
        let (new_left, new_right, svd, split) = match &plan.kind {
            PlanKind::Skip { kappa } => {
                self.samples_skipped += 1;
                return Ok(StepOutcome::Skipped { kappa: *kappa });
            }
            PlanKind::Fold {
                new_left,
                new_right,
                svd,
                split,
            } => (new_left, new_right, svd, split),
        };
        let r = self.rank;
        let (q_x, c_new) = apply_split_with_signs(split, self.variant, signs)?;
        debug_assert!(self.variant == Variant::Biased || split_ordering_holds(split));

        self.q_l.columns_mut().column_mut(r).assign(new_left);
        self.q_r.columns_mut().column_mut(r).assign(new_right);
        remix_columns(self.q_l.columns_mut(), &svd.u.dot(&q_x));
        remix_columns(self.q_r.columns_mut(), &svd.v.dot(&q_x));
        self.c_x.slice_mut(s![..r]).assign(&c_new);
        self.c_x[r] = 0.0;
        // Zero-weight slots may hold non-unit mixtures of empty columns; clear
        // them so later Gram-Schmidt passes only see unit or zero columns.
        for j in 0..r {
            if self.c_x[j] == 0.0 {
                self.q_l.columns_mut().column_mut(j).fill(0.0);
                self.q_r.columns_mut().column_mut(j).fill(0.0);
            }
        }
        self.samples_folded += 1;
        Ok(StepOutcome::Folded {
            sigma: split.sigma.clone(),
        })
    }

    /// Folds one `(dz, a)` pair into the state.
    pub fn update(&mut self, dz: ArrayView1<f64>, a: ArrayView1<f64>) -> Result<StepOutcome> {
        let plan = self.plan(dz, a)?;
        let signs = match self.variant {
            Variant::Unbiased if !plan.is_skip() => draw_signs(&mut self.rng, plan.sign_len()),
            _ => Vec::new(),
        };
        self.commit(&plan, &signs)
    }

    /// Current factors `(L̃, R̃)` with `L̃ R̃ᵀ` the accumulated estimate.
    pub fn materialize(&self) -> (Array2<f64>, Array2<f64>) {
        let r = self.rank;
        let root = self.c_x.slice(s![..r]).mapv(f64::sqrt);
        let mut l = self.q_l.columns().slice(s![.., ..r]).to_owned();
        let mut rr = self.q_r.columns().slice(s![.., ..r]).to_owned();
        for ((mut lc, mut rc), &w) in l
            .axis_iter_mut(Axis(1))
            .zip(rr.axis_iter_mut(Axis(1)))
            .zip(root.iter())
        {
            lc *= w;
            rc *= w;
        }
        if let FactorStorage::Fixed { bits } = self.storage {
            quantize_max_abs(&mut l, bits);
            quantize_max_abs(&mut rr, bits);
        }
        (l, rr)
    }

    /// Dense `n_o x n_i` estimate `L̃ R̃ᵀ`.
    pub fn estimate(&self) -> Array2<f64> {
        let (l, r) = self.materialize();
        l.dot(&r.t())
    }

    /// Clears the accumulated sum. The random stream keeps advancing.
    pub fn reset(&mut self) {
        self.q_l.columns_mut().fill(0.0);
        self.q_r.columns_mut().fill(0.0);
        self.c_x.fill(0.0);
        self.samples_seen = 0;
        self.samples_folded = 0;
        self.samples_skipped = 0;
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.footprint_values());
        out.extend_from_slice(MAGIC);
        for v in [self.n_o(), self.n_i(), self.rank] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(match self.variant {
            Variant::Biased => 0,
            Variant::Unbiased => 1,
        });
        let (kind, bits) = match self.storage {
            FactorStorage::Wide => (0u8, 0u32),
            FactorStorage::Fixed { bits } => (1u8, bits),
        };
        out.push(kind);
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(&self.kappa_th.to_le_bytes());
        for v in [self.samples_seen, self.samples_folded, self.samples_skipped, self.seed] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        for x in self
            .q_l
            .columns()
            .iter()
            .chain(self.q_r.columns().iter())
            .chain(self.c_x.iter())
        {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { buf: bytes, pos: 0 };
        if rd.take(4)? != MAGIC {
            return Err(LrtError::Corrupt("bad magic".into()));
        }
        let n_o = rd.u32()? as usize;
        let n_i = rd.u32()? as usize;
        let rank = rd.u32()? as usize;
        let variant = match rd.u8()? {
            0 => Variant::Biased,
            1 => Variant::Unbiased,
            v => return Err(LrtError::Corrupt(format!("unknown variant tag {v}"))),
        };
        let kind = rd.u8()?;
        let bits = rd.u32()?;
        let storage = match kind {
            0 => FactorStorage::Wide,
            1 => FactorStorage::Fixed { bits },
            v => return Err(LrtError::Corrupt(format!("unknown storage tag {v}"))),
        };
        let kappa_th = rd.f64()?;
        let samples_seen = rd.u64()?;
        let samples_folded = rd.u64()?;
        let samples_skipped = rd.u64()?;
        let seed = rd.u64()?;
        let word_pos = u128::from_le_bytes(rd.take(16)?.try_into().expect("16 bytes"));
        let mut state = Self::new(n_o, n_i, rank, variant, kappa_th, seed)
            .map_err(|e| LrtError::Corrupt(e.to_string()))?
            .with_storage(storage);
        let q = rank + 1;
        let mut read_matrix = |rows: usize| -> Result<Array2<f64>> {
            let mut data = Vec::with_capacity(rows * q);
            for _ in 0..rows * q {
                data.push(rd.f64()?);
            }
            Ok(Array2::from_shape_vec((rows, q), data).expect("shape matches length"))
        };
        let ql = read_matrix(n_o)?;
        let qr = read_matrix(n_i)?;
        let mut c_x = Array1::zeros(q);
        for v in c_x.iter_mut() {
            *v = rd.f64()?;
        }
        if rd.pos != bytes.len() {
            return Err(LrtError::Corrupt("trailing bytes".into()));
        }
        state.q_l = OrthoBasis::from_columns(ql);
        state.q_r = OrthoBasis::from_columns(qr);
        state.c_x = c_x;
        state.samples_seen = samples_seen;
        state.samples_folded = samples_folded;
        state.samples_skipped = samples_skipped;
        state.rng.set_word_pos(word_pos);
        Ok(state)
    }
}

fn split_ordering_holds(split: &SigmaSplit) -> bool {
    if split.is_degenerate() {
        return true;
    }
    let tail = split.s1 / split.k as f64;
    let slack = 1e-9 * split.sigma[0].max(1.0);
    let lower_ok = split.sigma[split.kept] <= tail + slack;
    let upper_ok = split.kept == 0 || tail < split.sigma[split.kept - 1] + slack;
    lower_ok && upper_ok
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(LrtError::Corrupt("truncated record".into()));
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// `Q[:, ..r] ← Q · mix` for a `q x r` mixing matrix, column by column on
/// the contiguous storage.
fn remix_columns(q_cols: &mut Array2<f64>, mix: &Array2<f64>) {
    let (q, r) = mix.dim();
    let n = q_cols.nrows();
    let mut out = vec![0.0; n * r];
    {
        let data = q_cols.t();
        let flat = data.as_slice().expect("basis storage is column-major");
        for j in 0..r {
            let dst = &mut out[j * n..(j + 1) * n];
            for k in 0..q {
                let m = mix[[k, j]];
                if m != 0.0 {
                    for (d, &x) in dst.iter_mut().zip(&flat[k * n..(k + 1) * n]) {
                        *d += m * x;
                    }
                }
            }
        }
    }
    let mut data = q_cols.view_mut().reversed_axes();
    let flat = data.as_slice_mut().expect("basis storage is column-major");
    flat[..n * r].copy_from_slice(&out);
}

/// The `σ_r`, `σ_q` pair recorded from one reduction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaTail {
    pub sigma_r: f64,
    pub sigma_q: f64,
}

impl SigmaTail {
    pub fn from_spectrum(sigma: &Array1<f64>) -> Self {
        let q = sigma.len();
        Self {
            sigma_r: sigma[q - 2],
            sigma_q: sigma[q - 1],
        }
    }
}

/// Per-element error variance predicted from a log of reductions over a
/// matrix with `n_elements` entries.
///
/// Biased: `(1/N) Σ σ_q²`. Unbiased: `(2/N) Σ σ_r σ_q`.
pub fn variance_estimate(log: &[SigmaTail], variant: Variant, n_elements: usize) -> Result<f64> {
    if log.is_empty() {
        return Err(LrtError::EmptyLog);
    }
    let n = n_elements as f64;
    Ok(match variant {
        Variant::Biased => log.iter().map(|t| t.sigma_q * t.sigma_q).sum::<f64>() / n,
        Variant::Unbiased => 2.0 * log.iter().map(|t| t.sigma_r * t.sigma_q).sum::<f64>() / n,
    })
}

/// Rank-1 unbiased baseline that mixes each new pair into the running factor
/// pair with a single random sign, balancing the two cross terms.
#[derive(Debug, Clone)]
pub struct Uoro {
    left: Array1<f64>,
    right: Array1<f64>,
    rng: ChaCha8Rng,
}

impl Uoro {
    pub fn new(n_o: usize, n_i: usize, seed: u64) -> Self {
        Self {
            left: Array1::zeros(n_o),
            right: Array1::zeros(n_i),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn update(&mut self, dz: ArrayView1<f64>, a: ArrayView1<f64>) -> Result<()> {
        let s = if self.rng.random::<bool>() { 1.0 } else { -1.0 };
        self.update_with_sign(dz, a, s)
    }

    /// `L ← ρ₀L + s·ρ₁·dz`, `R ← R/ρ₀ + s·a/ρ₁` with
    /// `ρ₀ = √(‖R‖/‖L‖)` and `ρ₁ = √(‖a‖/‖dz‖)`.
    pub fn update_with_sign(&mut self, dz: ArrayView1<f64>, a: ArrayView1<f64>, s: f64) -> Result<()> {
        if dz.len() != self.left.len() {
            return Err(LrtError::DimensionMismatch {
                what: "dz",
                expected: self.left.len(),
                got: dz.len(),
            });
        }
        if a.len() != self.right.len() {
            return Err(LrtError::DimensionMismatch {
                what: "a",
                expected: self.right.len(),
                got: a.len(),
            });
        }
        let nd = crate::linalg::norm(dz);
        let na = crate::linalg::norm(a);
        if nd == 0.0 || na == 0.0 {
            return Ok(());
        }
        let nl = crate::linalg::norm(self.left.view());
        let nr = crate::linalg::norm(self.right.view());
        let rho0 = if nl > 0.0 && nr > 0.0 { (nr / nl).sqrt() } else { 1.0 };
        let rho1 = (na / nd).sqrt();
        self.left *= rho0;
        self.left.scaled_add(s * rho1, &dz);
        self.right /= rho0;
        self.right.scaled_add(s / rho1, &a);
        Ok(())
    }

    pub fn materialize(&self) -> (Array1<f64>, Array1<f64>) {
        (self.left.clone(), self.right.clone())
    }

    pub fn estimate(&self) -> Array2<f64> {
        let l = self.left.view().insert_axis(Axis(1));
        let r = self.right.view().insert_axis(Axis(0));
        l.dot(&r)
    }
}
