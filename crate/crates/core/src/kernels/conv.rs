use super::mac::{dot_offset, pack_i16x2, smlad};
use super::OpCounters;
use crate::codec::{EncodedWeights, RunCursor, StoredWeights};
use crate::compress::{requantize, FixedMultiplier};
use crate::error::{Error, Result};
use crate::params::QWeights;
use crate::tensor::{QuantParams, TensorI8};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// Full convolution, weights `[C_out, k, k, C_in]`, k in {1, 3}.
    Standard,
    /// Per-channel 3x3 filtering, weights `[C, 3, 3]`.
    Depthwise,
}

const NO_TAP: usize = usize::MAX;

/// Record cursor at the first run touching each output channel's filter.
pub(crate) fn channel_segments(enc: &EncodedWeights, filter_len: usize, n_out: usize) -> Vec<RunCursor> {
    let mut segs = Vec::with_capacity(n_out);
    let mut runs = enc.runs();
    loop {
        let before = runs.cursor();
        let Some(run) = runs.next() else { break };
        let end = run.start + run.values.len();
        while segs.len() < n_out && end > segs.len() * filter_len {
            segs.push(before);
        }
    }
    let done = runs.cursor();
    segs.resize(n_out, done);
    segs
}

pub(crate) enum FilterSrc<'a> {
    Dense(&'a [i8]),
    Sparse { enc: &'a EncodedWeights, segs: Vec<RunCursor> },
}

impl<'a> FilterSrc<'a> {
    pub(crate) fn new(store: &'a StoredWeights, filter_len: usize, n_out: usize) -> Self {
        match store {
            StoredWeights::Dense(v) => FilterSrc::Dense(v),
            StoredWeights::Sparse(enc) => FilterSrc::Sparse { enc, segs: channel_segments(enc, filter_len, n_out) },
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    c_out: usize,
    depthwise: bool,
}

impl Geom {
    fn new(in_shape: [usize; 3], weights: &QWeights, kind: ConvKind, stride: usize) -> Result<Self> {
        let [h, w, c] = in_shape;
        if stride == 0 {
            return Err(Error::ShapeMismatch("conv stride must be at least 1".into()));
        }
        let (k, c_out) = match kind {
            ConvKind::Standard => {
                let s = &weights.shape;
                if s.len() != 4 || s[1] != s[2] || !(s[1] == 1 || s[1] == 3) || s[3] != c {
                    return Err(Error::ShapeMismatch(format!(
                        "conv weights {s:?} do not fit input {in_shape:?} (want [C_out, k, k, {c}], k in {{1, 3}})"
                    )));
                }
                (s[1], s[0])
            }
            ConvKind::Depthwise => {
                let s = &weights.shape;
                if s.as_slice() != [c, 3, 3] {
                    return Err(Error::ShapeMismatch(format!("depthwise weights {s:?} do not fit input {in_shape:?}")));
                }
                (3, c)
            }
        };
        if weights.bias.len() != c_out {
            return Err(Error::ShapeMismatch(format!("bias has {} values for {c_out} channels", weights.bias.len())));
        }
        let pad = if k == 3 { 1 } else { 0 };
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::ShapeMismatch(format!("input {in_shape:?} smaller than kernel")));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Ok(Self { h, w, c, k, stride, pad, oh, ow, c_out, depthwise: kind == ConvKind::Depthwise })
    }

    fn filter_len(&self) -> usize {
        if self.depthwise {
            9
        } else {
            self.k * self.k * self.c
        }
    }

    /// Channels a filter spans per kernel tap.
    fn tap_channels(&self) -> usize {
        if self.depthwise {
            1
        } else {
            self.c
        }
    }

    #[inline]
    fn taps(&self, oy: usize, ox: usize, out: &mut [usize; 9]) {
        let k = self.k;
        for ky in 0..k {
            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
            for kx in 0..k {
                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                out[ky * k + kx] = if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                    (iy as usize * self.w + ix as usize) * self.c
                } else {
                    NO_TAP
                };
            }
        }
    }
}

struct ConvCtx<'a> {
    g: Geom,
    input: &'a [i8],
    zin: i16,
    bias: &'a [i32],
    src: FilterSrc<'a>,
    mult: FixedMultiplier,
    zout: i8,
    relu: bool,
}

impl<'a> ConvCtx<'a> {
    /// Requantized output for channel `o` at output pixel `(oy, ox)`.
    #[inline]
    fn output(&self, o: usize, oy: usize, ox: usize, ctr: &mut OpCounters) -> i8 {
        let g = &self.g;
        let mut taps = [NO_TAP; 9];
        g.taps(oy, ox, &mut taps);
        let kk = g.k * g.k;
        let f_len = g.filter_len();
        let cf = g.tap_channels();
        let chan_off = if g.depthwise { o } else { 0 };
        let mut acc = self.bias[o];
        let mut macs = 0u64;
        match &self.src {
            FilterSrc::Dense(wd) => {
                let f = &wd[o * f_len..(o + 1) * f_len];
                for (t, &base) in taps[..kk].iter().enumerate() {
                    if base == NO_TAP {
                        continue;
                    }
                    let base = base + chan_off;
                    acc = dot_offset(acc, &f[t * cf..(t + 1) * cf], &self.input[base..base + cf], self.zin);
                    macs += cf as u64;
                }
            }
            FilterSrc::Sparse { enc, segs } => {
                let lo = o * f_len;
                let hi = lo + f_len;
                let fetch = |t: usize, ci: usize, macs: &mut u64| -> i16 {
                    let base = taps[t];
                    if base == NO_TAP {
                        0
                    } else {
                        *macs += 1;
                        self.input[base + chan_off + ci] as i16 - self.zin
                    }
                };
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
                    let q = s - lo;
                    let (mut t, mut ci) = (q / cf, q % cf);
                    let mut pairs = vals.chunks_exact(2);
                    for pair in &mut pairs {
                        let x0 = fetch(t, ci, &mut macs);
                        ci += 1;
                        if ci == cf {
                            ci = 0;
                            t += 1;
                        }
                        let x1 = fetch(t, ci, &mut macs);
                        ci += 1;
                        if ci == cf {
                            ci = 0;
                            t += 1;
                        }
                        acc = smlad(
                            acc,
                            pack_i16x2(pair[0] as i8 as i16, pair[1] as i8 as i16),
                            pack_i16x2(x0, x1),
                        );
                    }
                    if let Some(&v) = pairs.remainder().first() {
                        acc = acc.wrapping_add(v as i8 as i32 * fetch(t, ci, &mut macs) as i32);
                    }
                }
            }
        }
        ctr.macs += macs;
        let v = requantize(acc, self.mult, self.zout);
        if self.relu {
            v.max(self.zout)
        } else {
            v
        }
    }
}

/// Output shape of a convolution (optionally followed by 2x2 max pooling).
pub(crate) fn conv_out_shape(
    in_shape: [usize; 3],
    weights: &QWeights,
    kind: ConvKind,
    stride: usize,
    maxpool: bool,
) -> Result<[usize; 3]> {
    let g = Geom::new(in_shape, weights, kind, stride)?;
    if maxpool {
        if g.oh % 2 != 0 || g.ow % 2 != 0 {
            return Err(Error::ShapeMismatch(format!("max pooling needs even dims, got {}x{}", g.oh, g.ow)));
        }
        Ok([g.oh / 2, g.ow / 2, g.c_out])
    } else {
        Ok([g.oh, g.ow, g.c_out])
    }
}

/// Convolution over an HWC input, writing an HWC output.
///
/// The sparse path walks only the stored runs of each filter, so its MAC
/// count scales with the number of kept weights. Integer accumulation makes
/// the two paths bit-identical for the same quantized weights.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_into(
    input: &[i8],
    in_shape: [usize; 3],
    in_q: QuantParams,
    weights: &QWeights,
    kind: ConvKind,
    stride: usize,
    maxpool: bool,
    out_q: QuantParams,
    relu: bool,
    out: &mut [i8],
    ctr: &mut OpCounters,
) -> Result<[usize; 3]> {
    let g = Geom::new(in_shape, weights, kind, stride)?;
    let out_shape = conv_out_shape(in_shape, weights, kind, stride, maxpool)?;
    if input.len() != in_shape.iter().product::<usize>() {
        return Err(Error::ShapeMismatch(format!("input holds {} values for shape {in_shape:?}", input.len())));
    }
    if out.len() != out_shape.iter().product::<usize>() {
        return Err(Error::ShapeMismatch(format!("output buffer holds {} values for shape {out_shape:?}", out.len())));
    }
    let eff = in_q.scale as f64 * weights.qparams.scale as f64 / out_q.scale as f64;
    let ctx = ConvCtx {
        g,
        input,
        zin: in_q.zero_point as i16,
        bias: &weights.bias,
        src: FilterSrc::new(&weights.store, g.filter_len(), g.c_out),
        mult: FixedMultiplier::from_scale(eff),
        zout: out_q.zero_point,
        relu,
    };
    let [oh, ow, c_out] = out_shape;
    for o in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let v = if maxpool {
                    let mut m = i8::MIN;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(ctx.output(o, 2 * oy + dy, 2 * ox + dx, ctr));
                        }
                    }
                    m
                } else {
                    ctx.output(o, oy, ox, ctr)
                };
                out[(oy * ow + ox) * c_out + o] = v;
            }
        }
    }
    Ok(out_shape)
}

/// Depthwise 3x3 convolution (padding 1); weights blocks are kernel rows.
#[allow(clippy::too_many_arguments)]
pub fn dwconv2d_into(
    input: &[i8],
    in_shape: [usize; 3],
    in_q: QuantParams,
    weights: &QWeights,
    stride: usize,
    out_q: QuantParams,
    relu: bool,
    out: &mut [i8],
    ctr: &mut OpCounters,
) -> Result<[usize; 3]> {
    conv2d_into(input, in_shape, in_q, weights, ConvKind::Depthwise, stride, false, out_q, relu, out, ctr)
}

fn hwc(t: &TensorI8) -> Result<[usize; 3]> {
    match t.shape() {
        &[h, w, c] => Ok([h, w, c]),
        s => Err(Error::ShapeMismatch(format!("expected an HWC tensor, got shape {s:?}"))),
    }
}

fn run_tensor(
    input: &TensorI8,
    weights: &QWeights,
    kind: ConvKind,
    stride: usize,
    maxpool: bool,
    out_q: QuantParams,
    relu: bool,
) -> Result<(TensorI8, OpCounters)> {
    let in_shape = hwc(input)?;
    let out_shape = conv_out_shape(in_shape, weights, kind, stride, maxpool)?;
    let mut out = vec![0i8; out_shape.iter().product()];
    let mut ctr = OpCounters::default();
    conv2d_into(input.data(), in_shape, input.qparams(), weights, kind, stride, maxpool, out_q, relu, &mut out, &mut ctr)?;
    Ok((TensorI8::new(out_shape.to_vec(), out, out_q)?, ctr))
}

/// Standard convolution (3x3 with padding 1, or 1x1 without padding).
pub fn conv2d_int8(
    input: &TensorI8,
    weights: &QWeights,
    stride: usize,
    out_q: QuantParams,
    relu: bool,
) -> Result<(TensorI8, OpCounters)> {
    run_tensor(input, weights, ConvKind::Standard, stride, false, out_q, relu)
}

pub fn dwconv2d_int8(
    input: &TensorI8,
    weights: &QWeights,
    stride: usize,
    out_q: QuantParams,
    relu: bool,
) -> Result<(TensorI8, OpCounters)> {
    run_tensor(input, weights, ConvKind::Depthwise, stride, false, out_q, relu)
}

/// 3x3 stride-1 convolution fused with 2x2 max pooling.
pub fn conv_maxpool_int8(input: &TensorI8, weights: &QWeights, out_q: QuantParams, relu: bool) -> Result<(TensorI8, OpCounters)> {
    run_tensor(input, weights, ConvKind::Standard, 1, true, out_q, relu)
}
