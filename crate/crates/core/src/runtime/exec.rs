use std::time::{Duration, Instant};

use serde::Serialize;

use super::package::Package;
use super::plan::scratch_bytes;
use crate::error::{Error, Result};
use crate::ir::{infer_shapes, LayerKind, LayerSpec, ModelGraph, NodeRef};
use crate::kernels::{
    avgpool2x2_into, conv2d_into, dwconv2d_into, encoder_into, layernorm_into, linear_into, maxpool2x2_into, relu_into,
    residual_add_into, seqpool_into, softmax_rows_into, ConvKind, OpCounters, SoftmaxLut, NORM_SCALE_BITS,
};
use crate::params::LayerParams;
use crate::tensor::{QuantParams, TensorI8};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerStats {
    pub kind: LayerKind,
    pub elapsed: Duration,
    pub macs: u64,
    pub exp_evals: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutionStats {
    pub layers: Vec<LayerStats>,
    pub elapsed: Duration,
    pub macs: u64,
    pub exp_evals: u64,
    /// Largest number of arena bytes in use at any step.
    pub arena_high_water: usize,
    pub arena_size: usize,
}

/// A layer input: data, shape and quantization.
struct Operand<'a> {
    data: &'a [i8],
    shape: &'a [usize],
    q: QuantParams,
}

fn hwc(s: &[usize]) -> Result<[usize; 3]> {
    match *s {
        [h, w, c] => Ok([h, w, c]),
        _ => Err(Error::ShapeMismatch(format!("expected [H, W, C], got {s:?}"))),
    }
}

fn missing(l: &LayerSpec) -> Error {
    Error::InvalidGraph(format!("{} layer has no usable parameters", l.kind))
}

fn exec_layer(
    l: &LayerSpec,
    ins: &[Operand<'_>],
    out: &mut [i8],
    scratch: &mut [i8],
    lut: &mut SoftmaxLut,
    ctr: &mut OpCounters,
) -> Result<()> {
    let x = &ins[0];
    let relu = l.attrs.relu;
    let stride = l.attrs.stride();
    let weights = || match &l.params {
        Some(LayerParams::Weights(w)) => Ok(w),
        _ => Err(missing(l)),
    };
    match l.kind {
        LayerKind::Conv3x3 | LayerKind::Conv1x1 | LayerKind::ConvMaxPool => {
            let w = weights()?;
            let k = if l.kind == LayerKind::Conv1x1 { 1 } else { 3 };
            if w.shape.get(1) != Some(&k) {
                return Err(Error::ShapeMismatch(format!("{} needs a {k}x{k} kernel, got {:?}", l.kind, w.shape)));
            }
            let pool = l.kind == LayerKind::ConvMaxPool;
            let s = if pool { 1 } else { stride };
            conv2d_into(x.data, hwc(x.shape)?, x.q, w, ConvKind::Standard, s, pool, l.out_q, relu, out, ctr)?;
        }
        LayerKind::DWConv3x3 => {
            dwconv2d_into(x.data, hwc(x.shape)?, x.q, weights()?, stride, l.out_q, relu, out, ctr)?;
        }
        LayerKind::Linear => {
            let w = weights()?;
            let n_in = w.shape.get(1).copied().unwrap_or(0).max(1);
            linear_into(x.data, x.data.len() / n_in, x.q, w, l.out_q, relu, out, ctr)?;
        }
        LayerKind::MaxPool2x2 => {
            maxpool2x2_into(x.data, hwc(x.shape)?, out)?;
        }
        LayerKind::AvgPool2x2 => {
            avgpool2x2_into(x.data, hwc(x.shape)?, x.q, l.out_q, out)?;
        }
        LayerKind::SeqPool => {
            let Some(LayerParams::SeqPool { attn, logit_q }) = &l.params else { return Err(missing(l)) };
            let tokens = x.data.len() / out.len().max(1);
            seqpool_into(x.data, tokens, x.q, attn, *logit_q, l.out_q, scratch, out, lut, ctr)?;
        }
        LayerKind::Encoder => {
            let Some(LayerParams::Encoder(e)) = &l.params else { return Err(missing(l)) };
            let c = *x.shape.last().unwrap();
            encoder_into(x.data, x.data.len() / c, c, x.q, e, l.out_q, scratch, out, lut, ctr)?;
        }
        LayerKind::ScaledLayerNorm => {
            let Some(LayerParams::Norm(n)) = &l.params else { return Err(missing(l)) };
            layernorm_into(x.data, *x.shape.last().unwrap(), x.q, n, NORM_SCALE_BITS, l.out_q, out)?;
        }
        LayerKind::Softmax => {
            softmax_rows_into(x.data, *x.shape.last().unwrap(), x.q, out, lut, ctr)?;
        }
        LayerKind::ReLU => relu_into(x.data, x.q.zero_point, out)?,
        LayerKind::ResidualAdd => {
            let y = &ins[1];
            residual_add_into(x.data, x.q, y.data, y.q, l.out_q, out)?;
        }
    }
    Ok(())
}

/// Splits `arena` into disjoint mutable regions, in the order requested.
/// Identical ranges share one region; the returned index maps each request
/// to its region.
fn carve<'a>(arena: &'a mut [i8], ranges: &[std::ops::Range<usize>]) -> Result<(Vec<&'a mut [i8]>, Vec<usize>)> {
    let mut uniq: Vec<std::ops::Range<usize>> = Vec::new();
    let map: Vec<usize> = ranges
        .iter()
        .map(|r| match uniq.iter().position(|u| u == r) {
            Some(k) => k,
            None => {
                uniq.push(r.clone());
                uniq.len() - 1
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..uniq.len()).collect();
    order.sort_by_key(|&k| uniq[k].start);
    let mut slots: Vec<Option<&'a mut [i8]>> = (0..uniq.len()).map(|_| None).collect();
    let mut rest = arena;
    let mut base = 0usize;
    for k in order {
        let r = &uniq[k];
        if r.is_empty() {
            slots[k] = Some(&mut []);
            continue;
        }
        if r.start < base || r.end > base + rest.len() {
            return Err(Error::MalformedPackage(format!("plan regions overlap or leave the arena at {r:?}")));
        }
        let (_, tail) = rest.split_at_mut(r.start - base);
        let (mid, tail) = tail.split_at_mut(r.len());
        slots[k] = Some(mid);
        rest = tail;
        base = r.end;
    }
    Ok((slots.into_iter().map(|s| s.unwrap()).collect(), map))
}

/// Runs a package inside its planned arena.
pub fn run_inference(pkg: &Package, input: &TensorI8) -> Result<(TensorI8, ExecutionStats)> {
    let g = &pkg.graph;
    let plan = &pkg.plan;
    if input.shape() != g.input_shape.as_slice() {
        return Err(Error::ShapeMismatch(format!("input shape {:?}, package expects {:?}", input.shape(), g.input_shape)));
    }
    if input.qparams() != g.input_q {
        return Err(Error::ShapeMismatch(format!(
            "input quantization {:?} differs from the package's {:?}",
            input.qparams(),
            g.input_q
        )));
    }
    let start = Instant::now();
    let mut stats = ExecutionStats {
        layers: Vec::with_capacity(g.layers.len()),
        elapsed: Duration::ZERO,
        macs: 0,
        exp_evals: 0,
        arena_high_water: 0,
        arena_size: plan.arena_size,
    };
    if g.layers.is_empty() {
        stats.elapsed = start.elapsed();
        return Ok((input.clone(), stats));
    }
    let mut arena = vec![0i8; plan.arena_size];
    arena[plan.buffers[0].range()].copy_from_slice(input.data());
    let mut lut = SoftmaxLut::new(1.0);
    for (i, l) in g.layers.iter().enumerate() {
        let t0 = Instant::now();
        let mut ctr = OpCounters::default();
        let mut ranges: Vec<std::ops::Range<usize>> = l.inputs.iter().map(|&r| plan.node(r).range()).collect();
        let out_r = plan.buffers[i + 1].range();
        let scr_r = plan.scratch[i].range();
        if ranges.contains(&out_r) || (!scr_r.is_empty() && (ranges.contains(&scr_r) || scr_r == out_r)) {
            return Err(Error::MalformedPackage(format!("layer {i} output aliases an input")));
        }
        ranges.push(out_r);
        ranges.push(scr_r);
        let (regions, map) = carve(&mut arena, &ranges)?;
        let n_in = l.inputs.len();
        let (out_k, scr_k) = (map[n_in], map[n_in + 1]);
        // Take the write regions out first; the rest become shared inputs.
        let mut out_s: &mut [i8] = &mut [];
        let mut scr_s: &mut [i8] = &mut [];
        let mut shared: Vec<Option<&[i8]>> = vec![None; regions.len()];
        for (k, r) in regions.into_iter().enumerate() {
            if k == out_k {
                out_s = r;
            } else if k == scr_k {
                scr_s = r;
            } else {
                shared[k] = Some(r);
            }
        }
        let ins: Vec<Operand<'_>> = l
            .inputs
            .iter()
            .enumerate()
            .map(|(j, &r)| Operand {
                data: shared[map[j]].unwrap(),
                shape: g.node_shape(r).unwrap(),
                q: g.node_q(r).unwrap(),
            })
            .collect();
        exec_layer(l, &ins, out_s, scr_s, &mut lut, &mut ctr)?;
        stats.arena_high_water = stats.arena_high_water.max(plan.live_bytes(i));
        stats.macs += ctr.macs;
        stats.exp_evals += ctr.exp_evals;
        stats.layers.push(LayerStats { kind: l.kind, elapsed: t0.elapsed(), macs: ctr.macs, exp_evals: ctr.exp_evals });
    }
    let last = g.layers.len() - 1;
    let out = arena[plan.buffers[last + 1].range()].to_vec();
    let shape = g.layers[last].out_shape.clone().unwrap();
    stats.elapsed = start.elapsed();
    Ok((TensorI8::new(shape, out, g.layers[last].out_q)?, stats))
}

/// Straightforward interpreter: one fresh buffer per node and dense
/// weights. Serves as the oracle for the arena executor.
pub fn run_reference(graph: &ModelGraph, input: &TensorI8) -> Result<(TensorI8, OpCounters)> {
    let g = infer_shapes(graph)?;
    if input.shape() != g.input_shape.as_slice() {
        return Err(Error::ShapeMismatch(format!("input shape {:?}, graph expects {:?}", input.shape(), g.input_shape)));
    }
    let mut bufs: Vec<Vec<i8>> = vec![input.data().to_vec()];
    let mut total = OpCounters::default();
    let mut lut = SoftmaxLut::new(1.0);
    for l in &g.layers {
        let mut dense = l.clone();
        if let Some(p) = dense.params.as_mut() {
            for w in p.prunable_mut() {
                *w = w.densified();
            }
        }
        let ins: Vec<Operand<'_>> = l
            .inputs
            .iter()
            .map(|&r| Operand {
                data: &bufs[match r {
                    NodeRef::Input => 0,
                    NodeRef::Layer(j) => j + 1,
                }],
                shape: g.node_shape(r).unwrap(),
                q: g.node_q(r).unwrap(),
            })
            .collect();
        let mut out = vec![0i8; l.out_shape.as_ref().unwrap().iter().product()];
        let mut scratch = vec![0i8; scratch_bytes(l, ins[0].shape)];
        let mut ctr = OpCounters::default();
        exec_layer(&dense, &ins, &mut out, &mut scratch, &mut lut, &mut ctr)?;
        total.add(ctr);
        bufs.push(out);
    }
    let (shape, q) = match g.layers.last() {
        Some(l) => (l.out_shape.clone().unwrap(), l.out_q),
        None => (g.input_shape.clone(), g.input_q),
    };
    Ok((TensorI8::new(shape, bufs.pop().unwrap(), q)?, total))
}
