//! Independent reference implementations used as test oracles.
//!
//! Nothing here calls into the kernels under test. Integer oracles use plain
//! nested loops with 64-bit accumulators; float oracles work on dequantized
//! values and quantize only at the end.

#![allow(dead_code)]

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsekit_core::codec::{encode_blockwise_rle_lossless, StoredWeights};
use sparsekit_core::compress::{prune_blockwise, requantize, FixedMultiplier};
use sparsekit_core::kernels::LN_EPSILON;
use sparsekit_core::params::{NormParams, QWeights};
use sparsekit_core::ir::{infer_shapes, random_weights, LayerAttrs};
use sparsekit_core::{LayerKind, LayerSpec, ModelGraph, NodeRef, QuantParams, SparseConfig, TensorI8};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Nonzero INT8 value in `[-127, 127] \ {0}`.
pub fn nonzero<R: Rng>(rng: &mut R) -> i8 {
    let v = rng.gen_range(1..=127) as i8;
    if rng.gen_bool(0.5) {
        -v
    } else {
        v
    }
}

/// A tensor of `n_blocks * b` nonzero values with exactly
/// `floor(rho * n_blocks)` randomly chosen blocks zeroed.
pub fn blockwise_tensor<R: Rng>(rng: &mut R, n_blocks: usize, b: usize, rho: f64) -> Vec<i8> {
    let mut w: Vec<i8> = (0..n_blocks * b).map(|_| nonzero(rng)).collect();
    let pruned = ((rho * n_blocks as f64) + 1e-9).floor() as usize;
    for blk in sample(rng, n_blocks, pruned) {
        w[blk * b..(blk + 1) * b].fill(0);
    }
    w
}

/// Record-by-record decoder written from the byte layout alone.
pub fn decode_oracle(stream: &[u8], b: usize, len: usize, trailer: &[u8]) -> Vec<i8> {
    let mut out = vec![0i8; len];
    let mut pos = 0;
    for rec in stream.chunks(1 + b) {
        pos += rec[0] as usize;
        for (k, &v) in rec[1..].iter().enumerate() {
            out[pos + k] = v as i8;
        }
        pos += b;
    }
    let main = len - trailer.len();
    for (k, &v) in trailer.iter().enumerate() {
        out[main + k] = v as i8;
    }
    out
}

/// Plain-integer requantization through the shared fixed-point multiplier.
pub fn rq(acc: i64, eff: f64, zout: i8, relu: bool) -> i8 {
    let v = requantize(acc as i32, FixedMultiplier::from_scale(eff), zout);
    if relu {
        v.max(zout)
    } else {
        v
    }
}

/// Direct HWC convolution. `w` is `[co, k, k, ci]` (or `[c, 3, 3]` when
/// `depthwise`); padding is `k / 2`; out-of-bounds taps see the zero point.
#[allow(clippy::too_many_arguments)]
pub fn conv_oracle(
    x: &[i8],
    [h, wd, c]: [usize; 3],
    in_q: QuantParams,
    w: &[i8],
    w_q: QuantParams,
    co: usize,
    k: usize,
    depthwise: bool,
    bias: &[i32],
    stride: usize,
    out_q: QuantParams,
    relu: bool,
) -> (Vec<i8>, [usize; 3]) {
    let pad = k / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let eff = in_q.scale as f64 * w_q.scale as f64 / out_q.scale as f64;
    let zin = in_q.zero_point as i64;
    let mut out = vec![0i8; oh * ow * co];
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..co {
                let mut acc = bias[o] as i64;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as i64 - pad as i64;
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                            continue;
                        }
                        let base = (iy as usize * wd + ix as usize) * c;
                        if depthwise {
                            let wv = w[o * 9 + ky * 3 + kx] as i64;
                            acc += wv * (x[base + o] as i64 - zin);
                        } else {
                            for ci in 0..c {
                                let wv = w[((o * k + ky) * k + kx) * c + ci] as i64;
                                acc += wv * (x[base + ci] as i64 - zin);
                            }
                        }
                    }
                }
                out[(oy * ow + ox) * co + o] = rq(acc, eff, out_q.zero_point, relu);
            }
        }
    }
    (out, [oh, ow, co])
}

/// `[rows, n_in] x [n_out, n_in]^T`.
#[allow(clippy::too_many_arguments)]
pub fn linear_oracle(
    x: &[i8],
    rows: usize,
    in_q: QuantParams,
    w: &[i8],
    w_q: QuantParams,
    n_out: usize,
    bias: &[i32],
    out_q: QuantParams,
    relu: bool,
) -> Vec<i8> {
    let n_in = w.len() / n_out;
    let eff = in_q.scale as f64 * w_q.scale as f64 / out_q.scale as f64;
    let zin = in_q.zero_point as i64;
    let mut out = vec![0i8; rows * n_out];
    for r in 0..rows {
        for o in 0..n_out {
            let acc: i64 = bias[o] as i64
                + (0..n_in).map(|i| w[o * n_in + i] as i64 * (x[r * n_in + i] as i64 - zin)).sum::<i64>();
            out[r * n_out + o] = rq(acc, eff, out_q.zero_point, relu);
        }
    }
    out
}

/// Real value to INT8 with round-half-away and saturation.
pub fn quantize(x: f64, q: QuantParams) -> i8 {
    ((x / q.scale as f64).round() + q.zero_point as f64).clamp(-128.0, 127.0) as i8
}

pub fn dequantize(v: i8, q: QuantParams) -> f64 {
    (v as f64 - q.zero_point as f64) * q.scale as f64
}

/// Float layer norm of one row with variance guard `eps`.
pub fn layernorm_f64(row: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = (var + eps).sqrt();
    row.iter().zip(gamma.iter().zip(beta)).map(|(x, (g, b))| g * (x - mean) / sd + b).collect()
}

pub fn softmax_f64(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Brute-force interval checker: every pair of regions that are live at the
/// same step must be disjoint. Regions are `(offset, len, first, last)`.
pub fn overlapping_pairs(regions: &[(usize, usize, usize, usize)]) -> usize {
    let mut bad = 0;
    for (i, a) in regions.iter().enumerate() {
        for b in &regions[i + 1..] {
            let live_together = a.2 <= b.3 && b.2 <= a.3;
            let disjoint = a.0 + a.1 <= b.0 || b.0 + b.1 <= a.0 || a.1 == 0 || b.1 == 0;
            if live_together && !disjoint {
                bad += 1;
            }
        }
    }
    bad
}

fn rho_choice<R: Rng>(rng: &mut R) -> f64 {
    [0.0, 0.25, 0.5, 0.75, 0.9][rng.gen_range(0..5)]
}

/// Optional random sparse configuration for a prunable layer.
fn maybe_sparse<R: Rng>(rng: &mut R, layer: LayerSpec, depthwise: bool) -> LayerSpec {
    if rng.gen_bool(0.3) {
        return layer;
    }
    let b = if depthwise { 3 } else { [2, 4][rng.gen_range(0..2)] };
    layer.with_sparse(SparseConfig::new(rho_choice(rng), b).unwrap())
}

/// Earlier nodes with the same shape as `cur`, usable as a skip input.
fn skip_sources(g: &ModelGraph, cur: NodeRef) -> Vec<NodeRef> {
    let want = g.node_shape(cur).unwrap().to_vec();
    std::iter::once(NodeRef::Input)
        .chain((0..g.layers.len()).map(NodeRef::Layer))
        .filter(|&r| r != cur && g.node_shape(r) == Some(&want[..]))
        .collect()
}

fn image_graph<R: Rng>(rng: &mut R) -> ModelGraph {
    let side = [4, 6, 8][rng.gen_range(0..3)];
    let q = QuantParams::new(1.0 / 32.0, rng.gen_range(-20..=20)).unwrap();
    let mut g = ModelGraph::new(vec![side, side, rng.gen_range(1..=6)], q);
    for _ in 0..rng.gen_range(1..=8) {
        g = infer_shapes(&g).unwrap();
        let cur = g.last();
        let &[h, w, _] = g.node_shape(cur).unwrap() else { unreachable!() };
        let even = h % 2 == 0 && w % 2 == 0 && h >= 2;
        let conv = |rng: &mut R, stride: usize| LayerAttrs {
            out_channels: Some(rng.gen_range(1..=8)),
            stride,
            relu: rng.gen_bool(0.5),
            ..Default::default()
        };
        let layer = match rng.gen_range(0..7) {
            0 => {
                let stride = if h >= 4 && rng.gen_bool(0.3) { 2 } else { 1 };
                let a = conv(rng, stride);
                maybe_sparse(rng, LayerSpec::chain(LayerKind::Conv3x3, a, cur), false)
            }
            1 => {
                let a = conv(rng, 1);
                maybe_sparse(rng, LayerSpec::chain(LayerKind::Conv1x1, a, cur), false)
            }
            2 => {
                let a = LayerAttrs { relu: rng.gen_bool(0.5), ..Default::default() };
                maybe_sparse(rng, LayerSpec::chain(LayerKind::DWConv3x3, a, cur), true)
            }
            3 if even => LayerSpec::chain(LayerKind::MaxPool2x2, LayerAttrs::default(), cur),
            4 if even => {
                let a = conv(rng, 1);
                maybe_sparse(rng, LayerSpec::chain(LayerKind::ConvMaxPool, a, cur), false)
            }
            5 | 6 => {
                let srcs = skip_sources(&g, cur);
                if srcs.is_empty() {
                    LayerSpec::chain(LayerKind::ReLU, LayerAttrs::default(), cur)
                } else {
                    let other = srcs[rng.gen_range(0..srcs.len())];
                    LayerSpec::new(LayerKind::ResidualAdd, LayerAttrs::default(), vec![cur, other])
                }
            }
            _ => LayerSpec::chain(LayerKind::ReLU, LayerAttrs::default(), cur),
        };
        g.push(layer);
    }
    if rng.gen_bool(0.5) {
        let a = LayerAttrs { out_features: Some(rng.gen_range(2..=10)), flatten: true, ..Default::default() };
        let cur = g.last();
        g.push(maybe_sparse(rng, LayerSpec::chain(LayerKind::Linear, a, cur), false));
    }
    g
}

fn token_graph<R: Rng>(rng: &mut R) -> ModelGraph {
    let c = [4, 8][rng.gen_range(0..2)];
    let q = QuantParams::new(1.0 / 32.0, rng.gen_range(-10..=10)).unwrap();
    let mut g = ModelGraph::new(vec![rng.gen_range(1..=6), c], q);
    for _ in 0..rng.gen_range(1..=4) {
        let cur = g.last();
        let layer = match rng.gen_range(0..5) {
            0 | 1 => {
                let a = LayerAttrs { heads: Some([1, 2][rng.gen_range(0..2)]), hidden: Some(2 * c), ..Default::default() };
                maybe_sparse(rng, LayerSpec::chain(LayerKind::Encoder, a, cur), false)
            }
            2 => LayerSpec::chain(LayerKind::ScaledLayerNorm, LayerAttrs::default(), cur),
            3 => {
                let a = LayerAttrs { out_features: Some(c), relu: rng.gen_bool(0.5), ..Default::default() };
                maybe_sparse(rng, LayerSpec::chain(LayerKind::Linear, a, cur), false)
            }
            _ => LayerSpec::chain(LayerKind::Softmax, LayerAttrs::default(), cur),
        };
        g.push(layer);
    }
    let cur = g.last();
    g.push(LayerSpec::chain(LayerKind::SeqPool, LayerAttrs::default(), cur));
    let cur = g.last();
    let a = LayerAttrs { out_features: Some(rng.gen_range(2..=6)), flatten: true, ..Default::default() };
    g.push(LayerSpec::chain(LayerKind::Linear, a, cur));
    g
}

/// A small random graph with weights: either an HWC conv stack with skip
/// connections or a token stack with encoders and sequence pooling.
pub fn random_graph<R: Rng>(rng: &mut R) -> ModelGraph {
    let g = if rng.gen_bool(0.75) { image_graph(rng) } else { token_graph(rng) };
    random_weights(&g, rng.gen()).unwrap()
}

/// `(first, last)` step at which every node must hold its value: produced
/// at its layer's step (the input at step 0) and kept until its last reader.
/// The graph output stays live through the final step.
pub fn liveness_oracle(g: &ModelGraph) -> Vec<(usize, usize)> {
    let n = g.layers.len();
    let mut live: Vec<(usize, usize)> = (0..=n).map(|k| (k.saturating_sub(1), k.saturating_sub(1))).collect();
    for (i, l) in g.layers.iter().enumerate() {
        for r in &l.inputs {
            let k = match *r {
                NodeRef::Input => 0,
                NodeRef::Layer(j) => j + 1,
            };
            live[k].1 = live[k].1.max(i);
        }
    }
    live[n].1 = n.saturating_sub(1);
    live
}

/// The same values forced into run-length storage, whether or not that is
/// smaller.
pub fn as_sparse(w: &QWeights, b: usize) -> QWeights {
    let enc = encode_blockwise_rle_lossless(&w.dense_values(), b);
    QWeights { store: StoredWeights::Sparse(enc), ..w.clone() }
}

pub fn random_q<R: Rng>(r: &mut R, lo: f32, hi: f32) -> QuantParams {
    QuantParams::new(r.gen_range(lo..hi), r.gen_range(-20..=20)).unwrap()
}

pub fn pruned_weights<R: Rng>(r: &mut R, shape: Vec<usize>, rho: f64, b: usize) -> QWeights {
    let n: usize = shape.iter().product();
    let dense: Vec<i8> = (0..n).map(|_| r.gen_range(-127..=127)).collect();
    let (pruned, _) = prune_blockwise(&dense, &SparseConfig::new(rho, b).unwrap());
    let bias = (0..shape[0]).map(|_| r.gen_range(-3000..=3000)).collect();
    QWeights::new(shape, pruned, QuantParams::new(r.gen_range(0.002..0.02), 0).unwrap(), bias).unwrap()
}

pub fn real_norm(p: &NormParams) -> (Vec<f64>, Vec<f64>) {
    let g = p.gamma.iter().map(|&v| v as f64 * p.gamma_scale as f64).collect();
    let b = p.beta.iter().map(|&v| v as f64 * p.folded_scale() as f64).collect();
    (g, b)
}

/// Float layer norm on dequantized inputs, quantized once at the end.
pub fn layernorm_oracle(x: &TensorI8, p: &NormParams, out_q: QuantParams) -> Vec<i8> {
    let c = *x.shape().last().unwrap();
    let q = x.qparams();
    let (g, b) = real_norm(p);
    let eps = (q.scale as f64).powi(2) * LN_EPSILON as f64;
    x.data()
        .chunks(c)
        .flat_map(|row| {
            let real: Vec<f64> = row.iter().map(|&v| dequantize(v, q)).collect();
            layernorm_f64(&real, &g, &b, eps).into_iter().map(|y| quantize(y, out_q)).collect::<Vec<_>>()
        })
        .collect()
}

pub fn max_step_error(a: &[i8], b: &[i8]) -> i32 {
    a.iter().zip(b).map(|(&x, &y)| (x as i32 - y as i32).abs()).max().unwrap_or(0)
}

pub fn random_norm<R: Rng>(r: &mut R, c: usize) -> NormParams {
    NormParams {
        gamma: (0..c).map(|_| r.gen_range(32..=127)).collect(),
        beta: (0..c).map(|_| r.gen_range(-4000..=4000)).collect(),
        gamma_scale: 1.0 / 127.0,
    }
}

/// Rows whose float-normalized values span a wide, skewed range: one large
/// outlier over small noise.
pub fn skewed_rows<R: Rng>(r: &mut R, rows: usize, c: usize, q: QuantParams) -> TensorI8 {
    let mut data = Vec::with_capacity(rows * c);
    let mut kept = 0;
    while kept < rows {
        let spread = r.gen_range(8..30);
        let mut row: Vec<i8> = (0..c).map(|_| r.gen_range(-spread..=spread)).collect();
        row[r.gen_range(0..c)] = r.gen_range(90..=127);
        let real: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        let n = layernorm_f64(&real, &vec![1.0; c], &vec![0.0; c], 1.0);
        let (lo, hi) = n.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        if lo >= -2.0 && hi <= 9.3 && hi > 6.0 {
            data.extend(row);
            kept += 1;
        }
    }
    TensorI8::new(vec![rows, c], data, q).unwrap()
}

/// LUT-free integer softmax written from the fixed-point definition.
pub fn softmax_int_oracle(row: &[i8], scale: f32) -> Vec<i8> {
    let max = *row.iter().max().unwrap() as i32;
    let e: Vec<u64> = row
        .iter()
        .map(|&x| ((-((max - x as i32) as f64) * scale as f64).exp() * 2f64.powi(31)).round() as u64)
        .collect();
    let sum: u64 = e.iter().sum();
    e.iter().map(|&v| ((2 * 256 * v + sum) / (2 * sum)) as i64 - 128).map(|v| v.clamp(-128, 127) as i8).collect()
}
