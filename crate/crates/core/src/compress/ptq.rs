use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::QuantParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    /// Symmetric, zero point 0.
    Weight,
    /// Asymmetric over the observed range.
    Activation,
}

/// Running min/max of a calibration tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeStats {
    pub min: f32,
    pub max: f32,
}

impl RangeStats {
    pub fn new(min: f32, max: f32) -> Self {
        Self { min, max }
    }

    pub fn empty() -> Self {
        Self { min: f32::INFINITY, max: f32::NEG_INFINITY }
    }

    pub fn observe(&mut self, values: &[f32]) {
        for &v in values {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
    }

    pub fn of(values: &[f32]) -> Self {
        let mut s = Self::empty();
        s.observe(values);
        s
    }
}

/// Per-tensor INT8 calibration.
///
/// Weights: `S = max(|min|, |max|) / 127`, `Z = 0`.
/// Activations: `S = (max - min) / 255`, `Z = -128 - round(min / S)` clamped.
/// A constant range (`min == max`) yields `S = 1` with `Z` chosen so the
/// constant quantizes to 0.
pub fn calibrate_ptq(stats: RangeStats, role: TensorRole) -> Result<QuantParams> {
    let (min, max) = (stats.min as f64, stats.max as f64);
    if !(min.is_finite() && max.is_finite()) || min > max {
        return Err(Error::InvalidConfig(format!("calibration range [{min}, {max}] is not valid")));
    }
    if min == max {
        let z = (-min.round()).clamp(-128.0, 127.0) as i8;
        return Ok(QuantParams { scale: 1.0, zero_point: z });
    }
    match role {
        TensorRole::Weight => {
            let scale = (min.abs().max(max.abs()) / 127.0) as f32;
            Ok(QuantParams { scale, zero_point: 0 })
        }
        TensorRole::Activation => {
            let scale = (max - min) / 255.0;
            let z = (-128.0 - (min / scale).round()).clamp(-128.0, 127.0);
            Ok(QuantParams { scale: scale as f32, zero_point: z as i8 })
        }
    }
}

pub fn quantize_slice(values: &[f32], q: QuantParams) -> Vec<i8> {
    values.iter().map(|&v| q.quantize(v)).collect()
}

pub fn dequantize_slice(values: &[i8], q: QuantParams) -> Vec<f32> {
    values.iter().map(|&v| q.dequantize(v)).collect()
}

/// Biases are stored at scale `S_in * S_w` in 32-bit integers.
pub fn quantize_bias(bias: &[f32], in_scale: f32, w_scale: f32) -> Vec<i32> {
    let s = in_scale as f64 * w_scale as f64;
    bias.iter()
        .map(|&b| (b as f64 / s).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
        .collect()
}

/// A positive real scale as `multiplier * 2^-shift` with a 31-bit mantissa
/// (`multiplier` in `[2^30, 2^31)`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedMultiplier {
    pub multiplier: i32,
    pub shift: i32,
}

impl FixedMultiplier {
    pub fn from_scale(scale: f64) -> Self {
        if !(scale.is_finite() && scale > 0.0) {
            return Self { multiplier: 0, shift: 0 };
        }
        let mut exp = scale.log2().floor() as i32 + 1;
        let mut mant = scale / 2f64.powi(exp);
        // log2 can be off by one ulp near powers of two.
        if mant >= 1.0 {
            mant /= 2.0;
            exp += 1;
        } else if mant < 0.5 {
            mant *= 2.0;
            exp -= 1;
        }
        let mut m = (mant * (1u64 << 31) as f64).round() as i64;
        if m == 1i64 << 31 {
            m >>= 1;
            exp += 1;
        }
        Self { multiplier: m as i32, shift: 31 - exp }
    }

    pub fn to_f64(self) -> f64 {
        self.multiplier as f64 * 2f64.powi(-self.shift)
    }

    /// `round(acc * multiplier / 2^shift)`, rounding half away from zero.
    #[inline]
    pub fn apply(self, acc: i64) -> i64 {
        let prod = acc as i128 * self.multiplier as i128;
        let r = if self.shift <= 0 {
            prod << (-self.shift).min(64)
        } else if self.shift >= 126 {
            0
        } else {
            let half = 1i128 << (self.shift - 1);
            if prod >= 0 {
                (prod + half) >> self.shift
            } else {
                -((-prod + half) >> self.shift)
            }
        };
        r.clamp(i64::MIN as i128, i64::MAX as i128) as i64
    }
}

/// Scales a 32-bit accumulator into the output INT8 domain:
/// `clamp(round(acc * M >> shift) + Z_out, -128, 127)`.
#[inline]
pub fn requantize(acc: i32, multiplier: FixedMultiplier, zero_point: i8) -> i8 {
    saturate(multiplier.apply(acc as i64) + zero_point as i64)
}

#[inline]
pub(crate) fn saturate(v: i64) -> i8 {
    v.clamp(-128, 127) as i8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_calibration_is_symmetric() {
        let q = calibrate_ptq(RangeStats::new(-1.0, 1.0), TensorRole::Weight).unwrap();
        assert_eq!(q.zero_point, 0);
        assert_eq!(q.scale, (1.0f64 / 127.0) as f32);
        let q = calibrate_ptq(RangeStats::new(-0.5, 2.54), TensorRole::Weight).unwrap();
        assert_eq!(q.scale, 0.02);
    }

    #[test]
    fn activation_calibration_is_asymmetric() {
        let q = calibrate_ptq(RangeStats::new(0.0, 2.55), TensorRole::Activation).unwrap();
        assert!((q.scale - 0.01).abs() < 1e-7);
        assert_eq!(q.zero_point, -128);
    }

    #[test]
    fn constant_range_is_degenerate() {
        let q = calibrate_ptq(RangeStats::new(0.0, 0.0), TensorRole::Activation).unwrap();
        assert_eq!(q, QuantParams { scale: 1.0, zero_point: 0 });
        let q = calibrate_ptq(RangeStats::new(3.0, 3.0), TensorRole::Activation).unwrap();
        assert_eq!(q.quantize(3.0), 0);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(calibrate_ptq(RangeStats::new(1.0, 0.0), TensorRole::Weight).is_err());
        assert!(calibrate_ptq(RangeStats::new(f32::NAN, 0.0), TensorRole::Weight).is_err());
    }

    #[test]
    fn multiplier_reconstructs_scale() {
        for &s in &[1e-9, 0.0005, 0.01, 0.25, 0.5, 0.999, 1.0, 3.7, 1234.5] {
            let m = FixedMultiplier::from_scale(s);
            assert!((1 << 30..=i32::MAX).contains(&m.multiplier), "{s}: {m:?}");
            assert!(((m.to_f64() - s) / s).abs() < 1e-9, "{s}");
        }
    }

    #[test]
    fn requantize_examples() {
        let m = FixedMultiplier::from_scale(0.0005);
        assert_eq!(requantize(0, m, 7), 7);
        assert_eq!(requantize(1000, m, 0), 1);
        assert_eq!(requantize(-1000, m, 0), -1);
        assert_eq!(requantize(1_000_000, FixedMultiplier::from_scale(0.01), 0), 127);
        assert_eq!(requantize(-1_000_000, FixedMultiplier::from_scale(0.01), 0), -128);
    }

    #[test]
    fn half_rounds_away_from_zero() {
        let m = FixedMultiplier::from_scale(0.25);
        assert_eq!(m.apply(2), 1);
        assert_eq!(m.apply(-2), -1);
        assert_eq!(m.apply(6), 2);
        assert_eq!(m.apply(-6), -2);
    }

    #[test]
    fn bias_quantization() {
        assert_eq!(quantize_bias(&[0.5, -0.25], 0.5, 0.25), vec![4, -2]);
    }
}
