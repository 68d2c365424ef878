//! Integer layer normalization.
//!
//! Per token, with `x_i` the zero-point-shifted inputs over `c` channels:
//!
//! ```text
//! var_fx  = floor((c * sum(x^2) - sum(x)^2) * 2^16 / c^2) + eps * 2^16
//! sd_fx   = round(sqrt(var_fx))                     // sigma * 2^8
//! x_norm  = round((c * x_i - sum(x)) * 2^(8 + k) / (c * sd_fx))   // INT16, x 2^k
//! y       = requant(x_norm * gamma + beta, gamma_scale / 2^k / S_out)
//! ```
//!
//! `k = 7` is the scaled form; `k = 0` rounds the normalized value directly.

use crate::compress::{requantize, FixedMultiplier};
use crate::error::{Error, Result};
use crate::params::NormParams;
use crate::tensor::{QuantParams, TensorI8};

/// Power of two applied to the normalized value before INT16 storage.
pub const NORM_SCALE_BITS: u32 = 7;

/// Variance guard, in squared input quantization steps.
pub const LN_EPSILON: u32 = 1;

const VAR_FRAC_BITS: u32 = 16;

/// `round(sqrt(v))` by binary search on 32-bit values.
fn isqrt_round(v: u32) -> u32 {
    let (mut lo, mut hi) = (0u32, 1u32 << 16);
    // Invariant: lo^2 <= v < hi^2.
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if (mid as u64 * mid as u64) <= v as u64 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if (lo as u64 * lo as u64 + lo as u64) < v as u64 {
        lo + 1
    } else {
        lo
    }
}

#[inline]
fn div_round(num: i64, den: i64) -> i64 {
    let q = (num.abs() + den / 2) / den;
    if num < 0 {
        -q
    } else {
        q
    }
}

/// Layer norm over the last dimension of a row-major `[tokens, channels]`
/// buffer; `scale_bits` selects the scaled (`7`) or plain (`0`) variant.
#[allow(clippy::too_many_arguments)]
pub fn layernorm_into(
    input: &[i8],
    channels: usize,
    in_q: QuantParams,
    params: &NormParams,
    scale_bits: u32,
    out_q: QuantParams,
    out: &mut [i8],
) -> Result<()> {
    let c = channels;
    if c == 0 || input.len() % c != 0 || out.len() != input.len() {
        return Err(Error::ShapeMismatch(format!(
            "layer norm over {c} channels cannot take {} inputs / {} outputs",
            input.len(),
            out.len()
        )));
    }
    if params.gamma.len() != c || params.beta.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "layer norm params hold {}/{} values for {c} channels",
            params.gamma.len(),
            params.beta.len()
        )));
    }
    let folded = params.gamma_scale as f64 / (1u64 << scale_bits) as f64;
    let mult = FixedMultiplier::from_scale(folded / out_q.scale as f64);
    let zin = in_q.zero_point as i32;
    let zout = out_q.zero_point;
    let ci = c as i64;
    for (row, dst) in input.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let mut sum = 0i64;
        let mut sumsq = 0i64;
        for &v in row {
            let x = (v as i32 - zin) as i64;
            sum += x;
            sumsq += x * x;
        }
        let d = ci * sumsq - sum * sum;
        let var_fx = ((d << VAR_FRAC_BITS) / (ci * ci)) as u32 + (LN_EPSILON << VAR_FRAC_BITS);
        let sd_fx = isqrt_round(var_fx) as i64;
        let den = ci * sd_fx;
        for ((&v, o), (&g, &b)) in row.iter().zip(dst.iter_mut()).zip(params.gamma.iter().zip(&params.beta)) {
            let x = (v as i32 - zin) as i64;
            let num = (ci * x - sum) << (8 + scale_bits);
            let xn = div_round(num, den).clamp(i16::MIN as i64, i16::MAX as i64) as i16;
            let t = (xn as i32) * (g as i32) + b;
            *o = requantize(t, mult, zout);
        }
    }
    Ok(())
}

fn run(input: &TensorI8, params: &NormParams, bits: u32, out_q: QuantParams) -> Result<TensorI8> {
    let c = *input.shape().last().ok_or_else(|| Error::ShapeMismatch("layer norm on a scalar".into()))?;
    let mut out = vec![0i8; input.len()];
    layernorm_into(input.data(), c, input.qparams(), params, bits, out_q, &mut out)?;
    TensorI8::new(input.shape().to_vec(), out, out_q)
}

/// Layer norm with the normalized value kept at 2^7 resolution in INT16.
pub fn scaled_layernorm(input: &TensorI8, params: &NormParams, out_q: QuantParams) -> Result<TensorI8> {
    run(input, params, NORM_SCALE_BITS, out_q)
}

/// Baseline that rounds the normalized value straight to an integer.
pub fn unscaled_layernorm(input: &TensorI8, params: &NormParams, out_q: QuantParams) -> Result<TensorI8> {
    run(input, params, 0, out_q)
}
