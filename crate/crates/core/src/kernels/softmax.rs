//! Softmax over INT8 rows with max subtraction and a memoized exponential.
//!
//! For INT8 inputs the exponent `S_in * (x_i - x_max)` only takes the values
//! `-S_in * k` for integer `k = x_max - x_i` in `[0, 255]`, so every distinct
//! `k` needs at most one `exp` call. A bitmap records which table entries
//! have been filled; entries are Q0.31 fixed point.

use super::OpCounters;
use crate::error::{Error, Result};
use crate::tensor::{QuantParams, TensorI8};

/// Table entries, indexed by `|x_i - x_max|` in `[0, 256]`.
pub const SOFTMAX_TABLE_LEN: usize = 257;

const BITMAP_BYTES: usize = SOFTMAX_TABLE_LEN.div_ceil(8);

/// Softmax outputs cover `[0, 1]` with the full INT8 range.
pub const SOFTMAX_OUT_Q: QuantParams = QuantParams { scale: 1.0 / 256.0, zero_point: -128 };

/// `round(exp(-k * scale) * 2^31)`.
#[inline]
pub fn exp_q31(k: usize, scale: f32) -> u32 {
    ((-(k as f64) * scale as f64).exp() * (1u64 << 31) as f64).round() as u32
}

/// Bitmap-guarded exponential table bound to one input scale.
#[derive(Debug, Clone)]
pub struct SoftmaxLut {
    scale: f32,
    bitmap: [u8; BITMAP_BYTES],
    table: [u32; SOFTMAX_TABLE_LEN],
    evals: u64,
}

impl SoftmaxLut {
    pub fn new(input_scale: f32) -> Self {
        Self { scale: input_scale, bitmap: [0; BITMAP_BYTES], table: [0; SOFTMAX_TABLE_LEN], evals: 0 }
    }

    /// Bytes of bitmap plus table.
    pub const fn footprint_bytes() -> usize {
        BITMAP_BYTES + SOFTMAX_TABLE_LEN * std::mem::size_of::<u32>()
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    /// Clears the table when the input scale changes.
    pub fn rebind(&mut self, input_scale: f32) {
        if input_scale != self.scale {
            self.scale = input_scale;
            self.bitmap = [0; BITMAP_BYTES];
        }
    }

    pub fn is_cached(&self, k: usize) -> bool {
        self.bitmap[k / 8] & (1 << (k % 8)) != 0
    }

    /// Number of `exp` evaluations performed so far.
    pub fn exp_evals(&self) -> u64 {
        self.evals
    }

    #[inline]
    pub fn get(&mut self, k: usize) -> u32 {
        if !self.is_cached(k) {
            self.table[k] = exp_q31(k, self.scale);
            self.bitmap[k / 8] |= 1 << (k % 8);
            self.evals += 1;
        }
        self.table[k]
    }
}

#[inline]
fn normalize(e: u32, sum: u64) -> i8 {
    // round(e * 256 / sum), half up; then shift by the output zero point.
    let q = (2 * 256 * e as u64 + sum) / (2 * sum);
    (q as i64 + SOFTMAX_OUT_Q.zero_point as i64).clamp(-128, 127) as i8
}

/// Row-wise softmax through the lookup table.
pub fn softmax_rows_into(
    input: &[i8],
    row_len: usize,
    in_q: QuantParams,
    out: &mut [i8],
    lut: &mut SoftmaxLut,
    ctr: &mut OpCounters,
) -> Result<()> {
    if row_len == 0 || input.len() % row_len != 0 || out.len() != input.len() {
        return Err(Error::ShapeMismatch(format!(
            "softmax rows of {row_len} cannot take {} inputs / {} outputs",
            input.len(),
            out.len()
        )));
    }
    lut.rebind(in_q.scale);
    let before = lut.exp_evals();
    for (row, dst) in input.chunks_exact(row_len).zip(out.chunks_exact_mut(row_len)) {
        let max = *row.iter().max().unwrap();
        let sum: u64 = row.iter().map(|&x| lut.get((max as i32 - x as i32) as usize) as u64).sum();
        for (&x, o) in row.iter().zip(dst.iter_mut()) {
            *o = normalize(lut.get((max as i32 - x as i32) as usize), sum);
        }
    }
    ctr.exp_evals += lut.exp_evals() - before;
    Ok(())
}

/// Softmax over the last dimension using a fresh table.
pub fn softmax_lut(input: &TensorI8) -> Result<(TensorI8, u64)> {
    let n = *input.shape().last().ok_or_else(|| Error::ShapeMismatch("softmax on a scalar".into()))?;
    let mut lut = SoftmaxLut::new(input.qparams().scale);
    let mut out = vec![0i8; input.len()];
    let mut ctr = OpCounters::default();
    softmax_rows_into(input.data(), n, input.qparams(), &mut out, &mut lut, &mut ctr)?;
    Ok((TensorI8::new(input.shape().to_vec(), out, SOFTMAX_OUT_Q)?, ctr.exp_evals))
}

/// Same arithmetic as [`softmax_lut`] but evaluates `exp` once per element.
pub fn softmax_direct(input: &TensorI8) -> Result<(TensorI8, u64)> {
    let n = *input.shape().last().ok_or_else(|| Error::ShapeMismatch("softmax on a scalar".into()))?;
    if n == 0 {
        return Err(Error::ShapeMismatch("softmax over an empty row".into()));
    }
    let scale = input.qparams().scale;
    let mut out = Vec::with_capacity(input.len());
    let mut evals = 0u64;
    let mut exps = vec![0u32; n];
    for row in input.data().chunks_exact(n) {
        let max = *row.iter().max().unwrap();
        for (e, &x) in exps.iter_mut().zip(row) {
            *e = exp_q31((max as i32 - x as i32) as usize, scale);
            evals += 1;
        }
        let sum: u64 = exps.iter().map(|&e| e as u64).sum();
        out.extend(exps.iter().map(|&e| normalize(e, sum)));
    }
    Ok((TensorI8::new(input.shape().to_vec(), out, SOFTMAX_OUT_Q)?, evals))
}
