use super::conv::FilterSrc;
use super::mac::{dot_offset, pack_i16x2, smlad};
use super::OpCounters;
use crate::compress::{requantize, FixedMultiplier};
use crate::error::{Error, Result};
use crate::params::QWeights;
use crate::tensor::{QuantParams, TensorI8};

/// Fully connected layer over `rows` vectors of `in` features.
///
/// Weights are `[out, in]`; the output is `[rows, out]`.
#[allow(clippy::too_many_arguments)]
pub fn linear_into(
    input: &[i8],
    rows: usize,
    in_q: QuantParams,
    weights: &QWeights,
    out_q: QuantParams,
    relu: bool,
    out: &mut [i8],
    ctr: &mut OpCounters,
) -> Result<()> {
    if weights.shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!("linear weights must be 2-D, got {:?}", weights.shape)));
    }
    let (n_out, n_in) = (weights.shape[0], weights.shape[1]);
    if input.len() != rows * n_in {
        return Err(Error::ShapeMismatch(format!("linear input holds {} values, expected {rows} x {n_in}", input.len())));
    }
    if out.len() != rows * n_out {
        return Err(Error::ShapeMismatch(format!("linear output holds {} values, expected {rows} x {n_out}", out.len())));
    }
    if weights.bias.len() != n_out {
        return Err(Error::ShapeMismatch(format!("bias has {} values for {n_out} outputs", weights.bias.len())));
    }
    let mult = FixedMultiplier::from_scale(in_q.scale as f64 * weights.qparams.scale as f64 / out_q.scale as f64);
    let zin = in_q.zero_point as i16;
    let zout = out_q.zero_point;
    let src = FilterSrc::new(&weights.store, n_in, n_out);
    let mut macs = 0u64;
    for o in 0..n_out {
        for r in 0..rows {
            let x = &input[r * n_in..(r + 1) * n_in];
            let mut acc = weights.bias[o];
            match &src {
                FilterSrc::Dense(wd) => {
                    acc = dot_offset(acc, &wd[o * n_in..(o + 1) * n_in], x, zin);
                    macs += n_in as u64;
                }
                FilterSrc::Sparse { enc, segs } => {
                    let lo = o * n_in;
                    let hi = lo + n_in;
                    for run in enc.runs_from(segs[o]) {
                        if run.start >= hi {
                            break;
                        }
                        let s = run.start.max(lo);
                        let e = (run.start + run.values.len()).min(hi);
                        if s >= e {
                            continue;
                        }
                        let vals = &run.values[s - run.start..e - run.start];
                        let xs = &x[s - lo..e - lo];
                        let mut wp = vals.chunks_exact(2);
                        let mut xp = xs.chunks_exact(2);
                        for (wc, xc) in (&mut wp).zip(&mut xp) {
                            acc = smlad(
                                acc,
                                pack_i16x2(wc[0] as i8 as i16, wc[1] as i8 as i16),
                                pack_i16x2(xc[0] as i16 - zin, xc[1] as i16 - zin),
                            );
                        }
                        if let (Some(&wl), Some(&xl)) = (wp.remainder().first(), xp.remainder().first()) {
                            acc = acc.wrapping_add(wl as i8 as i32 * (xl as i16 - zin) as i32);
                        }
                        macs += vals.len() as u64;
                    }
                }
            }
            let v = requantize(acc, mult, zout);
            out[r * n_out + o] = if relu { v.max(zout) } else { v };
        }
    }
    ctr.macs += macs;
    Ok(())
}

/// Output shape of a linear layer applied to `in_shape`.
///
/// If the last dimension equals the input feature count the layer maps each
/// row; otherwise a tensor whose element count equals the feature count is
/// flattened into a single vector.
pub fn linear_out_shape(in_shape: &[usize], n_in: usize, n_out: usize) -> Result<Vec<usize>> {
    match in_shape.last() {
        Some(&last) if last == n_in => {
            let mut s = in_shape.to_vec();
            *s.last_mut().unwrap() = n_out;
            Ok(s)
        }
        _ if in_shape.iter().product::<usize>() == n_in => Ok(vec![n_out]),
        _ => Err(Error::ShapeMismatch(format!("linear layer with {n_in} inputs cannot consume shape {in_shape:?}"))),
    }
}

pub fn linear_int8(input: &TensorI8, weights: &QWeights, out_q: QuantParams, relu: bool) -> Result<(TensorI8, OpCounters)> {
    if weights.shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!("linear weights must be 2-D, got {:?}", weights.shape)));
    }
    let (n_out, n_in) = (weights.shape[0], weights.shape[1]);
    let out_shape = linear_out_shape(input.shape(), n_in, n_out)?;
    let rows = input.len() / n_in;
    let mut out = vec![0i8; rows * n_out];
    let mut ctr = OpCounters::default();
    linear_into(input.data(), rows, input.qparams(), weights, out_q, relu, &mut out, &mut ctr)?;
    Ok((TensorI8::new(out_shape, out, out_q)?, ctr))
}
