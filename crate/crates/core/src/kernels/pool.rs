use super::linear::linear_into;
use super::softmax::{softmax_rows_into, SoftmaxLut, SOFTMAX_OUT_Q};
use super::OpCounters;
use crate::compress::{requantize, FixedMultiplier};
use crate::error::{Error, Result};
use crate::params::QWeights;
use crate::tensor::{QuantParams, TensorI8};

/// Pooling variant with the parameters it needs.
#[derive(Debug, Clone, Copy)]
pub enum PoolKind<'a> {
    Max2x2,
    Avg2x2 { out_q: QuantParams },
    /// Softmax-weighted sum over tokens; `attn` is a `[1, C]` scorer.
    Seq { attn: &'a QWeights, logit_q: QuantParams, out_q: QuantParams },
}

fn halved(in_shape: [usize; 3], input_len: usize, out_len: usize) -> Result<[usize; 3]> {
    let [h, w, c] = in_shape;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch(format!("2x2 pooling needs even spatial dims, got {h}x{w}")));
    }
    if input_len != h * w * c || out_len != h * w * c / 4 {
        return Err(Error::ShapeMismatch(format!(
            "2x2 pooling of {in_shape:?} cannot take {input_len} inputs / {out_len} outputs"
        )));
    }
    Ok([h / 2, w / 2, c])
}

fn window<F: FnMut(usize, [i8; 4])>(input: &[i8], in_shape: [usize; 3], mut f: F) {
    let [_, w, c] = in_shape;
    let (oh, ow) = (in_shape[0] / 2, w / 2);
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (2 * oy * w + 2 * ox) * c;
            for ch in 0..c {
                let at = |dy: usize, dx: usize| input[base + (dy * w + dx) * c + ch];
                f((oy * ow + ox) * c + ch, [at(0, 0), at(0, 1), at(1, 0), at(1, 1)]);
            }
        }
    }
}

/// 2x2 stride-2 max pooling; output keeps the input quantization.
pub fn maxpool2x2_into(input: &[i8], in_shape: [usize; 3], out: &mut [i8]) -> Result<[usize; 3]> {
    let shape = halved(in_shape, input.len(), out.len())?;
    window(input, in_shape, |i, v| out[i] = v.into_iter().max().unwrap());
    Ok(shape)
}

/// 2x2 stride-2 average pooling with round-half-away requantization.
pub fn avgpool2x2_into(
    input: &[i8],
    in_shape: [usize; 3],
    in_q: QuantParams,
    out_q: QuantParams,
    out: &mut [i8],
) -> Result<[usize; 3]> {
    let shape = halved(in_shape, input.len(), out.len())?;
    let mult = FixedMultiplier::from_scale(in_q.scale as f64 / (4.0 * out_q.scale as f64));
    let z = in_q.zero_point as i32;
    window(input, in_shape, |i, v| {
        let sum: i32 = v.iter().map(|&x| x as i32 - z).sum();
        out[i] = requantize(sum, mult, out_q.zero_point);
    });
    Ok(shape)
}

/// `round(256 * acc / total)`: a probability-weighted sum renormalized by the
/// actual sum of the quantized probabilities, which rounding moves off 256.
pub(crate) fn weighted_mean_q8(acc: i64, total: i64) -> i64 {
    if total <= 0 {
        return 0;
    }
    let num = acc * 256;
    let q = (num.abs() + total / 2) / total;
    if num < 0 {
        -q
    } else {
        q
    }
}

/// Scratch needed by [`seqpool_into`]: token logits plus probabilities.
pub fn seqpool_scratch_bytes(tokens: usize) -> usize {
    2 * tokens
}

/// Sequence pooling of `[tokens, channels]` into `[channels]`.
#[allow(clippy::too_many_arguments)]
pub fn seqpool_into(
    input: &[i8],
    tokens: usize,
    in_q: QuantParams,
    attn: &QWeights,
    logit_q: QuantParams,
    out_q: QuantParams,
    scratch: &mut [i8],
    out: &mut [i8],
    lut: &mut SoftmaxLut,
    ctr: &mut OpCounters,
) -> Result<()> {
    let c = out.len();
    if attn.shape != [1, c] {
        return Err(Error::ShapeMismatch(format!("sequence pooling scorer must be [1, {c}], got {:?}", attn.shape)));
    }
    if tokens == 0 || input.len() != tokens * c || scratch.len() < seqpool_scratch_bytes(tokens) {
        return Err(Error::ShapeMismatch(format!(
            "sequence pooling of {tokens} x {c} got {} inputs and {} scratch bytes",
            input.len(),
            scratch.len()
        )));
    }
    let (logits, rest) = scratch.split_at_mut(tokens);
    let probs = &mut rest[..tokens];
    linear_into(input, tokens, in_q, attn, logit_q, false, logits, ctr)?;
    softmax_rows_into(logits, tokens, logit_q, probs, lut, ctr)?;
    let mult = FixedMultiplier::from_scale(in_q.scale as f64 / (256.0 * out_q.scale as f64));
    let zx = in_q.zero_point as i64;
    let zp = SOFTMAX_OUT_Q.zero_point as i64;
    let total: i64 = probs.iter().map(|&p| p as i64 - zp).sum();
    for (ch, o) in out.iter_mut().enumerate() {
        let acc: i64 = (0..tokens).map(|t| (probs[t] as i64 - zp) * (input[t * c + ch] as i64 - zx)).sum();
        *o = (mult.apply(weighted_mean_q8(acc, total)) + out_q.zero_point as i64).clamp(-128, 127) as i8;
    }
    ctr.macs += (tokens * c) as u64;
    Ok(())
}

/// Tensor-level pooling. 2x2 kinds take `[H, W, C]`; sequence pooling takes
/// `[T, C]` or `[H, W, C]` (spatial positions as tokens) and returns `[C]`.
pub fn pooling(input: &TensorI8, kind: PoolKind<'_>) -> Result<TensorI8> {
    let shape = input.shape();
    match kind {
        PoolKind::Max2x2 | PoolKind::Avg2x2 { .. } => {
            let &[h, w, c] = shape else {
                return Err(Error::ShapeMismatch(format!("2x2 pooling expects an HWC tensor, got {shape:?}")));
            };
            let mut out = vec![0i8; h * w * c / 4];
            let (out_shape, q) = match kind {
                PoolKind::Avg2x2 { out_q } => (avgpool2x2_into(input.data(), [h, w, c], input.qparams(), out_q, &mut out)?, out_q),
                _ => (maxpool2x2_into(input.data(), [h, w, c], &mut out)?, input.qparams()),
            };
            TensorI8::new(out_shape.to_vec(), out, q)
        }
        PoolKind::Seq { attn, logit_q, out_q } => {
            let c = *shape.last().ok_or_else(|| Error::ShapeMismatch("sequence pooling on a scalar".into()))?;
            if c == 0 || shape.len() < 2 {
                return Err(Error::ShapeMismatch(format!("sequence pooling expects tokens x channels, got {shape:?}")));
            }
            let tokens = input.len() / c;
            let mut scratch = vec![0i8; seqpool_scratch_bytes(tokens)];
            let mut out = vec![0i8; c];
            let mut lut = SoftmaxLut::new(logit_q.scale);
            let mut ctr = OpCounters::default();
            seqpool_into(input.data(), tokens, input.qparams(), attn, logit_q, out_q, &mut scratch, &mut out, &mut lut, &mut ctr)?;
            TensorI8::new(vec![c], out, out_q)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_constant_is_constant() {
        let x = TensorI8::new(vec![4, 4, 3], vec![-17; 48], QuantParams::new(0.3, 2).unwrap()).unwrap();
        let y = pooling(&x, PoolKind::Max2x2).unwrap();
        assert_eq!(y.shape(), &[2, 2, 3]);
        assert!(y.data().iter().all(|&v| v == -17));
        assert_eq!(y.qparams(), x.qparams());
    }

    #[test]
    fn avgpool_rounds_half_away() {
        let x = TensorI8::new(vec![2, 2, 1], vec![0, 0, 0, 4], QuantParams::unit()).unwrap();
        let y = pooling(&x, PoolKind::Avg2x2 { out_q: QuantParams::unit() }).unwrap();
        assert_eq!(y.data(), &[1]);
        let x = TensorI8::new(vec![2, 2, 2], vec![0, 0, 0, 0, 0, 0, 2, -2], QuantParams::unit()).unwrap();
        let y = pooling(&x, PoolKind::Avg2x2 { out_q: QuantParams::unit() }).unwrap();
        // 2/4 = 0.5 -> 1 and -0.5 -> -1.
        assert_eq!(y.data(), &[1, -1]);
    }

    #[test]
    fn odd_dims_rejected() {
        let x = TensorI8::zeros(vec![3, 4, 1], QuantParams::unit());
        assert!(matches!(pooling(&x, PoolKind::Max2x2), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn seqpool_uniform_logits_average_tokens() {
        let c = 3;
        let attn = QWeights::new(vec![1, c], vec![0; c], QuantParams::unit(), vec![0]).unwrap();
        let in_q = QuantParams::new(0.1, 0).unwrap();
        let data: Vec<i8> = vec![10, -20, 40, 30, 0, 44, -10, 20, 40, 50, 60, 4];
        let x = TensorI8::new(vec![4, c], data.clone(), in_q).unwrap();
        let y = pooling(&x, PoolKind::Seq { attn: &attn, logit_q: QuantParams::unit(), out_q: in_q }).unwrap();
        for ch in 0..c {
            let mean = (0..4).map(|t| data[t * c + ch] as f64).sum::<f64>() / 4.0;
            assert!((y.data()[ch] as f64 - mean).abs() <= 1.0);
        }
    }
}
