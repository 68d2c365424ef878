//! Pre-norm transformer encoder built from the integer operators.
//!
//! Scratch is one contiguous buffer split into row-major `[T, C]` regions:
//!
//! ```text
//! attention:  R0 ln1 | R1 q | R2 k | R3 v | R4 heads | scores + probs (2T)
//! mlp:        R0 proj, later fc2 | R1 x1 | R2 ln2 | hidden [T, H] ...
//! ```

use super::eltwise::residual_add_into;
use super::linear::linear_into;
use super::norm::{layernorm_into, NORM_SCALE_BITS};
use super::pool::weighted_mean_q8;
use super::softmax::{softmax_rows_into, SoftmaxLut, SOFTMAX_OUT_Q};
use super::OpCounters;
use crate::compress::{requantize, FixedMultiplier};
use crate::error::{Error, Result};
use crate::params::EncoderParams;
use crate::tensor::{QuantParams, TensorI8};

/// Scratch bytes needed by [`encoder_into`].
pub fn encoder_scratch_bytes(tokens: usize, channels: usize, hidden: usize) -> usize {
    let tc = tokens * channels;
    (5 * tc + 2 * tokens).max(3 * tc + tokens * hidden)
}

fn check(params: &EncoderParams, channels: usize) -> Result<()> {
    let c = channels;
    if params.heads == 0 || c % params.heads != 0 {
        return Err(Error::ShapeMismatch(format!("{} heads do not divide {c} channels", params.heads)));
    }
    for (name, lin, shape) in [
        ("query", &params.wq, [c, c]),
        ("key", &params.wk, [c, c]),
        ("value", &params.wv, [c, c]),
        ("projection", &params.proj, [c, c]),
        ("fc1", &params.fc1, [params.hidden(), c]),
        ("fc2", &params.fc2, [c, params.hidden()]),
    ] {
        if lin.weights.shape != shape {
            return Err(Error::ShapeMismatch(format!("{name} weights are {:?}, expected {shape:?}", lin.weights.shape)));
        }
    }
    Ok(())
}

/// Encoder over `tokens` rows of `channels` features.
#[allow(clippy::too_many_arguments)]
pub fn encoder_into(
    input: &[i8],
    tokens: usize,
    channels: usize,
    in_q: QuantParams,
    params: &EncoderParams,
    out_q: QuantParams,
    scratch: &mut [i8],
    out: &mut [i8],
    lut: &mut SoftmaxLut,
    ctr: &mut OpCounters,
) -> Result<()> {
    check(params, channels)?;
    let (t, c) = (tokens, channels);
    let tc = t * c;
    let hidden = params.hidden();
    if input.len() != tc || out.len() != tc {
        return Err(Error::ShapeMismatch(format!("encoder over {t} x {c} got {} inputs / {} outputs", input.len(), out.len())));
    }
    let need = encoder_scratch_bytes(t, c, hidden);
    if scratch.len() < need {
        return Err(Error::ShapeMismatch(format!("encoder needs {need} scratch bytes, got {}", scratch.len())));
    }

    // Attention.
    {
        let (ln, rest) = scratch.split_at_mut(tc);
        let (q, rest) = rest.split_at_mut(tc);
        let (k, rest) = rest.split_at_mut(tc);
        let (v, rest) = rest.split_at_mut(tc);
        let (heads, rest) = rest.split_at_mut(tc);
        let (scores, rest) = rest.split_at_mut(t);
        let probs = &mut rest[..t];

        let ln1 = &params.ln1;
        layernorm_into(input, c, in_q, &ln1.norm, NORM_SCALE_BITS, ln1.out_q, ln)?;
        linear_into(ln, t, ln1.out_q, &params.wq.weights, params.wq.out_q, false, q, ctr)?;
        linear_into(ln, t, ln1.out_q, &params.wk.weights, params.wk.out_q, false, k, ctr)?;
        linear_into(ln, t, ln1.out_q, &params.wv.weights, params.wv.out_q, false, v, ctr)?;

        let dh = c / params.heads;
        let (qq, kq, vq) = (params.wq.out_q, params.wk.out_q, params.wv.out_q);
        let score_mult =
            FixedMultiplier::from_scale(qq.scale as f64 * kq.scale as f64 / ((dh as f64).sqrt() * params.score_q.scale as f64));
        let attn_mult = FixedMultiplier::from_scale(vq.scale as f64 / (256.0 * params.attn_q.scale as f64));
        let (zq, zk, zv) = (qq.zero_point as i32, kq.zero_point as i32, vq.zero_point as i32);
        let zp = SOFTMAX_OUT_Q.zero_point as i64;
        for h in 0..params.heads {
            let off = h * dh;
            for i in 0..t {
                let qi = &q[i * c + off..i * c + off + dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &k[j * c + off..j * c + off + dh];
                    let acc = qi.iter().zip(kj).fold(0i32, |a, (&x, &y)| a + (x as i32 - zq) * (y as i32 - zk));
                    *s = requantize(acc, score_mult, params.score_q.zero_point);
                }
                softmax_rows_into(scores, t, params.score_q, probs, lut, ctr)?;
                let total: i64 = probs.iter().map(|&p| p as i64 - zp).sum();
                for d in 0..dh {
                    let acc: i64 =
                        (0..t).map(|j| (probs[j] as i64 - zp) * (v[j * c + off + d] as i32 - zv) as i64).sum();
                    let r = attn_mult.apply(weighted_mean_q8(acc, total)) + params.attn_q.zero_point as i64;
                    heads[i * c + off + d] = r.clamp(-128, 127) as i8;
                }
            }
        }
        ctr.macs += (2 * params.heads * t * t * dh) as u64;
        linear_into(heads, t, params.attn_q, &params.proj.weights, params.proj.out_q, false, ln, ctr)?;
    }

    // Residual, norm and MLP.
    let (proj, rest) = scratch.split_at_mut(tc);
    let (x1, rest) = rest.split_at_mut(tc);
    let (ln2, rest) = rest.split_at_mut(tc);
    let h = &mut rest[..t * hidden];
    residual_add_into(input, in_q, proj, params.proj.out_q, params.resid_q, x1)?;
    layernorm_into(x1, c, params.resid_q, &params.ln2.norm, NORM_SCALE_BITS, params.ln2.out_q, ln2)?;
    linear_into(ln2, t, params.ln2.out_q, &params.fc1.weights, params.fc1.out_q, true, h, ctr)?;
    linear_into(h, t, params.fc1.out_q, &params.fc2.weights, params.fc2.out_q, false, proj, ctr)?;
    residual_add_into(x1, params.resid_q, proj, params.fc2.out_q, out_q, out)
}

/// Encoder on a `[T, C]` tensor (or `[H, W, C]`, read as `H * W` tokens).
pub fn encoder_forward(input: &TensorI8, params: &EncoderParams, out_q: QuantParams) -> Result<(TensorI8, OpCounters)> {
    let c = *input.shape().last().ok_or_else(|| Error::ShapeMismatch("encoder on a scalar".into()))?;
    if c == 0 || input.shape().len() < 2 {
        return Err(Error::ShapeMismatch(format!("encoder expects tokens x channels, got {:?}", input.shape())));
    }
    let t = input.len() / c;
    let mut scratch = vec![0i8; encoder_scratch_bytes(t, c, params.hidden())];
    let mut out = vec![0i8; input.len()];
    let mut lut = SoftmaxLut::new(params.score_q.scale);
    let mut ctr = OpCounters::default();
    encoder_into(input.data(), t, c, input.qparams(), params, out_q, &mut scratch, &mut out, &mut lut, &mut ctr)?;
    Ok((TensorI8::new(input.shape().to_vec(), out, out_q)?, ctr))
}
