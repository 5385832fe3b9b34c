//! Uniform power-of-2 fixed-point quantizers.
//!
//! A [`QuantSpec`] maps reals onto `2^bits` evenly spaced levels inside a
//! fixed clip range `[lo, hi]` with step `Δ = (hi − lo) / 2^bits`.
//! Mid-tread grids contain `lo + kΔ` (and therefore zero for symmetric
//! ranges); mid-rise grids are offset by half a step. Ties round to even.

use ndarray::{Array, ArrayView, Dimension, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("bit width must be in 1..=32, got {0}")]
    Bits(u32),
    #[error("clip range [{lo}, {hi}] must be finite with lo < hi")]
    Range { lo: f64, hi: f64 },
    #[error("clip range width {0} is not a power of two")]
    NotPowerOfTwo(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundMode {
    /// Levels at `lo + kΔ`.
    MidTread,
    /// Levels at `lo + (k + ½)Δ`.
    MidRise,
}

impl RoundMode {
    /// Mid-rise for 1 and 2 bit grids, mid-tread otherwise.
    pub fn default_for(bits: u32) -> Self {
        if bits <= 2 {
            RoundMode::MidRise
        } else {
            RoundMode::MidTread
        }
    }

    fn offset(self) -> f64 {
        match self {
            RoundMode::MidTread => 0.0,
            RoundMode::MidRise => 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct RawSpec {
    bits: u32,
    lo: f64,
    hi: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mode: Option<RoundMode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct QuantSpec {
    bits: u32,
    lo: f64,
    hi: f64,
    mode: RoundMode,
    step: f64,
    max_index: f64,
}

impl TryFrom<RawSpec> for QuantSpec {
    type Error = QuantError;
    fn try_from(raw: RawSpec) -> Result<Self, QuantError> {
        let spec = QuantSpec::new(raw.bits, raw.lo, raw.hi)?;
        Ok(match raw.mode {
            Some(mode) => spec.with_mode(mode),
            None => spec,
        })
    }
}

impl From<QuantSpec> for RawSpec {
    fn from(s: QuantSpec) -> Self {
        RawSpec {
            bits: s.bits,
            lo: s.lo,
            hi: s.hi,
            mode: Some(s.mode),
        }
    }
}

impl QuantSpec {
    pub fn new(bits: u32, lo: f64, hi: f64) -> Result<Self, QuantError> {
        if !(1..=32).contains(&bits) {
            return Err(QuantError::Bits(bits));
        }
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(QuantError::Range { lo, hi });
        }
        let width = hi - lo;
        if width.log2().fract() != 0.0 {
            return Err(QuantError::NotPowerOfTwo(width));
        }
        let levels = (1u64 << bits) as f64;
        Ok(Self {
            bits,
            lo,
            hi,
            mode: RoundMode::default_for(bits),
            step: width / levels,
            max_index: levels - 1.0,
        })
    }

    pub fn with_mode(mut self, mode: RoundMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn mode(&self) -> RoundMode {
        self.mode
    }

    /// Step between adjacent levels.
    pub fn lsb(&self) -> f64 {
        self.step
    }

    /// Variance `Δ²/12` of uniform rounding noise on this grid.
    pub fn noise_variance(&self) -> f64 {
        self.step * self.step / 12.0
    }

    pub fn min_level(&self) -> f64 {
        self.from_index(0)
    }

    pub fn max_level(&self) -> f64 {
        self.from_index(self.max_index as u32)
    }

    /// Index of the level nearest to `x`, saturating at both ends.
    pub fn index_of(&self, x: f64) -> u32 {
        let k = ((x - self.lo) / self.step - self.mode.offset()).round_ties_even();
        if k.is_nan() {
            return 0;
        }
        k.clamp(0.0, self.max_index) as u32
    }

    pub fn from_index(&self, k: u32) -> f64 {
        self.lo + (k as f64 + self.mode.offset()) * self.step
    }

    pub fn quantize(&self, x: f64) -> f64 {
        self.from_index(self.index_of(x))
    }

    /// Clamps into the span of representable levels without rounding.
    pub fn clip(&self, x: f64) -> f64 {
        x.clamp(self.min_level(), self.max_level())
    }

    pub fn in_range(&self, x: f64) -> bool {
        (self.lo..=self.hi).contains(&x)
    }

    pub fn quantize_array<D: Dimension>(&self, x: ArrayView<f64, D>) -> Array<f64, D> {
        x.mapv(|v| self.quantize(v))
    }

    pub fn quantize_inplace<D: Dimension>(&self, x: &mut Array<f64, D>) {
        x.mapv_inplace(|v| self.quantize(v));
    }

    /// Straight-through gradient: passes `upstream` where the forward input
    /// lay inside `[lo, hi]`, zero where it saturated.
    pub fn ste_backward<D: Dimension>(
        &self,
        upstream: ArrayView<f64, D>,
        forward_input: ArrayView<f64, D>,
    ) -> Array<f64, D> {
        let mut out = upstream.to_owned();
        Zip::from(&mut out)
            .and(&forward_input)
            .for_each(|g, &x| {
                if !self.in_range(x) {
                    *g = 0.0;
                }
            });
        out
    }
}

/// A quantizer that may be disabled (identity) for float-mode runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct Quantizer(pub Option<QuantSpec>);

impl Quantizer {
    pub const IDENTITY: Quantizer = Quantizer(None);

    pub fn q(&self, x: f64) -> f64 {
        match &self.0 {
            Some(s) => s.quantize(x),
            None => x,
        }
    }

    pub fn q_inplace<D: Dimension>(&self, x: &mut Array<f64, D>) {
        if let Some(s) = &self.0 {
            s.quantize_inplace(x);
        }
    }

    /// Step size, or zero when disabled.
    pub fn lsb(&self) -> f64 {
        self.0.map_or(0.0, |s| s.lsb())
    }

    pub fn spec(&self) -> Option<&QuantSpec> {
        self.0.as_ref()
    }

    pub fn is_enabled(&self) -> bool {
        self.0.is_some()
    }
}

impl From<QuantSpec> for Quantizer {
    fn from(s: QuantSpec) -> Self {
        Quantizer(Some(s))
    }
}

/// The four quantizers of a layer: weights, biases/accumulators,
/// activations and gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantProfile {
    #[serde(default)]
    pub w: Quantizer,
    #[serde(default)]
    pub b: Quantizer,
    #[serde(default)]
    pub a: Quantizer,
    #[serde(default)]
    pub g: Quantizer,
}

impl Default for QuantProfile {
    fn default() -> Self {
        default_quant_profile()
    }
}

impl QuantProfile {
    /// All quantizers disabled.
    pub fn float() -> Self {
        Self {
            w: Quantizer::IDENTITY,
            b: Quantizer::IDENTITY,
            a: Quantizer::IDENTITY,
            g: Quantizer::IDENTITY,
        }
    }

    /// Default profile with the weight grid replaced by `bits` over [−1, 1].
    pub fn with_weight_bits(mut self, bits: u32) -> Result<Self, QuantError> {
        self.w = QuantSpec::new(bits, -1.0, 1.0)?.into();
        Ok(self)
    }
}

/// Weights 8b in [−1, 1], biases 16b in [−8, 8], activations 8b in [0, 2],
/// gradients 8b in [−1, 1].
pub fn default_quant_profile() -> QuantProfile {
    let spec = |bits, lo, hi| Quantizer(Some(QuantSpec::new(bits, lo, hi).expect("valid")));
    QuantProfile {
        w: spec(8, -1.0, 1.0),
        b: spec(16, -8.0, 8.0),
        a: spec(8, 0.0, 2.0),
        g: spec(8, -1.0, 1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn w8() -> QuantSpec {
        QuantSpec::new(8, -1.0, 1.0).unwrap()
    }

    #[test]
    fn eight_bit_examples() {
        let q = w8();
        assert_eq!(q.quantize(0.0), 0.0);
        assert_eq!(q.quantize(1.5), 1.0 - 1.0 / 128.0);
        assert_eq!(q.quantize(0.3), 38.0 / 128.0);
        assert_eq!(q.quantize(-7.0), -1.0);
    }

    #[test]
    fn one_bit_mid_rise() {
        let q = QuantSpec::new(1, -1.0, 1.0).unwrap();
        assert_eq!(q.mode(), RoundMode::MidRise);
        assert_eq!(q.quantize(-0.2), -0.5);
        assert_eq!(q.quantize(0.01), 0.5);
        assert_eq!((q.min_level(), q.max_level()), (-0.5, 0.5));
    }

    #[test]
    fn ties_round_to_even() {
        let q = w8();
        // 0.5 LSB above zero sits exactly between levels 128 and 129.
        assert_eq!(q.quantize(0.5 / 128.0), 0.0);
        assert_eq!(q.quantize(1.5 / 128.0), 2.0 / 128.0);
    }

    #[test]
    fn rejects_bad_specs() {
        assert_eq!(QuantSpec::new(0, -1.0, 1.0), Err(QuantError::Bits(0)));
        assert!(matches!(QuantSpec::new(8, 1.0, -1.0), Err(QuantError::Range { .. })));
        assert!(matches!(QuantSpec::new(8, 0.0, 3.0), Err(QuantError::NotPowerOfTwo(_))));
    }

    #[test]
    fn ste_masks_saturated_inputs() {
        let q = w8();
        let g = q.ste_backward(array![1.0, 2.0, 3.0].view(), array![0.5, 2.0, -1.0].view());
        assert_eq!(g, array![1.0, 0.0, 3.0]);
    }

    #[test]
    fn default_profile_matches_published_widths() {
        let p = default_quant_profile();
        let w = p.w.spec().unwrap();
        assert_eq!((w.bits(), w.lo(), w.hi()), (8, -1.0, 1.0));
        let b = p.b.spec().unwrap();
        assert_eq!((b.bits(), b.lo(), b.hi()), (16, -8.0, 8.0));
        let a = p.a.spec().unwrap();
        assert_eq!((a.bits(), a.lo(), a.hi()), (8, 0.0, 2.0));
        let g = p.g.spec().unwrap();
        assert_eq!((g.bits(), g.lo(), g.hi()), (8, -1.0, 1.0));
    }

    #[test]
    fn profile_toml_round_trip() {
        let p = default_quant_profile();
        let text = toml::to_string(&p).unwrap();
        let back: QuantProfile = toml::from_str(&text).unwrap();
        assert_eq!(back, p);
        let float: QuantProfile = toml::from_str("").unwrap();
        assert_eq!(float, QuantProfile::float());
    }
}
