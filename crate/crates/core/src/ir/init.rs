//! Random integer parameters for structure-only graphs.
//!
//! Weights are uniform INT8 with scale `1 / (127 * sqrt(fan_in))`, so the
//! real-valued weights are roughly variance-preserving. Output scales follow
//! the same heuristic, which keeps activations inside the INT8 range without
//! collapsing them to the zero point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::shapes::weight_specs;
use super::{infer_shapes, LayerKind, ModelGraph};
use crate::error::Result;
use crate::kernels::SOFTMAX_OUT_Q;
use crate::params::{EncoderParams, LayerParams, LinearParams, NormLayer, NormParams, QWeights};
use crate::tensor::QuantParams;

const NORM_OUT_SCALE: f32 = 1.0 / 32.0;
const SCORE_SCALE: f32 = 1.0 / 16.0;

fn q(scale: f32) -> QuantParams {
    QuantParams { scale, zero_point: 0 }
}

/// Output scale of a projection fed at `in_scale`.
fn proj_scale(in_scale: f32) -> f32 {
    in_scale / 3f32.sqrt()
}

fn sum_scale(a: f32, b: f32) -> f32 {
    a.max(b) * 1.5
}

fn weights(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> QWeights {
    let n: usize = shape.iter().product();
    let fan_in = (n / shape[0].max(1)).max(1);
    let data = (0..n).map(|_| rng.gen_range(-127i32..=127) as i8).collect();
    let bias = (0..shape[0]).map(|_| rng.gen_range(-256..=256)).collect();
    let scale = 1.0 / (127.0 * (fan_in as f32).sqrt());
    QWeights::new(shape, data, q(scale), bias).expect("consistent shapes")
}

fn norm(rng: &mut ChaCha8Rng, c: usize) -> NormParams {
    NormParams {
        gamma: (0..c).map(|_| rng.gen_range(64i32..=127) as i8).collect(),
        beta: (0..c).map(|_| rng.gen_range(-2048..=2048)).collect(),
        gamma_scale: 1.0 / 127.0,
    }
}

fn linear(rng: &mut ChaCha8Rng, shape: Vec<usize>, in_scale: f32) -> LinearParams {
    LinearParams { weights: weights(rng, shape), out_q: q(proj_scale(in_scale)) }
}

/// Fills every layer's parameters and output quantization with seeded
/// random values. Existing parameters are replaced.
pub fn random_weights(graph: &ModelGraph, seed: u64) -> Result<ModelGraph> {
    let mut g = infer_shapes(graph)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..g.layers.len() {
        let in_shape = g.node_shape(g.layers[i].inputs[0]).unwrap().to_vec();
        let in_q = g.node_q(g.layers[i].inputs[0]).unwrap();
        let layout = weight_specs(&g.layers[i], &in_shape)?;
        let c = in_shape.last().copied().unwrap_or(0);
        let layer = &mut g.layers[i];
        let (params, out_q) = match layer.kind {
            LayerKind::Conv3x3 | LayerKind::Conv1x1 | LayerKind::DWConv3x3 | LayerKind::ConvMaxPool | LayerKind::Linear => {
                let w = weights(&mut rng, layout.tensors[0].shape.clone());
                (Some(LayerParams::Weights(w)), q(proj_scale(in_q.scale)))
            }
            LayerKind::SeqPool => {
                let attn = weights(&mut rng, layout.tensors[0].shape.clone());
                (Some(LayerParams::SeqPool { attn, logit_q: q(proj_scale(in_q.scale)) }), in_q)
            }
            LayerKind::ScaledLayerNorm => (Some(LayerParams::Norm(norm(&mut rng, c))), q(NORM_OUT_SCALE)),
            LayerKind::Encoder => {
                let heads = layer.attrs.heads.unwrap_or(1);
                let t = &layout.tensors;
                let ln = NORM_OUT_SCALE;
                let wq = linear(&mut rng, t[0].shape.clone(), ln);
                let wk = linear(&mut rng, t[1].shape.clone(), ln);
                let wv = linear(&mut rng, t[2].shape.clone(), ln);
                let attn_q = wv.out_q;
                let proj = linear(&mut rng, t[3].shape.clone(), attn_q.scale);
                let resid_q = q(sum_scale(in_q.scale, proj.out_q.scale));
                let fc1 = linear(&mut rng, t[4].shape.clone(), ln);
                let fc2 = linear(&mut rng, t[5].shape.clone(), fc1.out_q.scale);
                let out_q = q(sum_scale(resid_q.scale, fc2.out_q.scale));
                let e = EncoderParams {
                    heads,
                    ln1: NormLayer { norm: norm(&mut rng, c), out_q: q(ln) },
                    wq,
                    wk,
                    wv,
                    score_q: q(SCORE_SCALE),
                    attn_q,
                    proj,
                    resid_q,
                    ln2: NormLayer { norm: norm(&mut rng, c), out_q: q(ln) },
                    fc1,
                    fc2,
                };
                (Some(LayerParams::Encoder(Box::new(e))), out_q)
            }
            LayerKind::MaxPool2x2 | LayerKind::ReLU | LayerKind::AvgPool2x2 => (None, in_q),
            LayerKind::Softmax => (None, SOFTMAX_OUT_Q),
            LayerKind::ResidualAdd => {
                let other = layer.inputs.get(1).copied();
                let b = other.and_then(|r| g.node_q(r)).unwrap_or(in_q);
                let layer = &mut g.layers[i];
                layer.params = None;
                layer.out_q = q(sum_scale(in_q.scale, b.scale));
                continue;
            }
        };
        layer.params = params;
        layer.out_q = out_q;
    }
    Ok(g)
}
