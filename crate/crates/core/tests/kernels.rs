mod common;

use common::{
    as_sparse, conv_oracle, dequantize, layernorm_f64, layernorm_oracle, linear_oracle, max_step_error, pruned_weights, quantize, random_norm,
    random_q, real_norm, rng, skewed_rows, softmax_f64, softmax_int_oracle,
};
use proptest::prelude::*;
use rand::Rng;
use sparsekit_core::compress::{requantize, FixedMultiplier};
use sparsekit_core::ir::{random_weights, LayerAttrs};
use sparsekit_core::kernels::*;
use sparsekit_core::params::{EncoderParams, LayerParams, NormParams, QWeights};
use sparsekit_core::{LayerKind, LayerSpec, ModelGraph, NodeRef, QuantParams, TensorI8};

fn qp(scale: f32, z: i8) -> QuantParams {
    QuantParams::new(scale, z).unwrap()
}

fn unit() -> QuantParams {
    QuantParams::unit()
}

// ---------------------------------------------------------------- conv

#[test]
fn conv_with_zero_weights_emits_output_zero_point() {
    let x = TensorI8::random(vec![5, 5, 3], qp(0.1, 4), 1);
    let w = QWeights::new(vec![4, 3, 3, 3], vec![0; 108], qp(0.01, 0), vec![0; 4]).unwrap();
    let (y, _) = conv2d_int8(&x, &w, 1, qp(0.2, -11), false).unwrap();
    assert!(y.data().iter().all(|&v| v == -11));
    let (y, _) = conv2d_int8(&x, &as_sparse(&w, 4), 2, qp(0.2, 5), false).unwrap();
    assert!(y.data().iter().all(|&v| v == 5));
}

#[test]
fn conv_identity_1x1_passes_input_through() {
    let c = 4;
    let x = TensorI8::random(vec![6, 3, c], unit(), 2);
    let mut w = vec![0i8; c * c];
    for i in 0..c {
        w[i * c + i] = 1;
    }
    let w = QWeights::new(vec![c, 1, 1, c], w, unit(), vec![0; c]).unwrap();
    let (y, _) = conv2d_int8(&x, &w, 1, unit(), false).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn sparse_conv_equals_dense_oracle() {
    let mut r = rng(10);
    for case in 0..1000 {
        let rho = [0.3, 0.6, 0.9][case % 3];
        let b = [2, 4][r.gen_range(0..2)];
        let k = [1, 3][r.gen_range(0..2)];
        let (h, wd, ci, co) = (r.gen_range(1..8), r.gen_range(1..8), r.gen_range(1..9), r.gen_range(1..7));
        let stride = r.gen_range(1..=2);
        let in_q = random_q(&mut r, 0.01, 0.1);
        let out_q = random_q(&mut r, 0.05, 0.5);
        let relu = r.gen_bool(0.5);
        let x = TensorI8::random(vec![h, wd, ci], in_q, r.gen());
        let w = pruned_weights(&mut r, vec![co, k, k, ci], rho, b);
        let dense = w.dense_values();
        let (expect, shape) =
            conv_oracle(x.data(), [h, wd, ci], in_q, &dense, w.qparams, co, k, false, &w.bias, stride, out_q, relu);
        let (yd, cd) = conv2d_int8(&x, &w, stride, out_q, relu).unwrap();
        let (ys, cs) = conv2d_int8(&x, &as_sparse(&w, b), stride, out_q, relu).unwrap();
        assert_eq!(yd.shape(), &shape);
        assert_eq!(yd.data(), &expect[..], "dense case {case}");
        assert_eq!(ys.data(), &expect[..], "sparse case {case}");
        assert!(cs.macs <= cd.macs);
    }
}

#[test]
fn conv_maxpool_equals_conv_then_pool() {
    let mut r = rng(11);
    for _ in 0..50 {
        let (h, wd, ci, co) = (2 * r.gen_range(1..5), 2 * r.gen_range(1..5), r.gen_range(1..6), r.gen_range(1..6));
        let in_q = random_q(&mut r, 0.01, 0.1);
        let out_q = random_q(&mut r, 0.05, 0.5);
        let x = TensorI8::random(vec![h, wd, ci], in_q, r.gen());
        let w = pruned_weights(&mut r, vec![co, 3, 3, ci], 0.5, 2);
        let (full, _) =
            conv_oracle(x.data(), [h, wd, ci], in_q, &w.dense_values(), w.qparams, co, 3, false, &w.bias, 1, out_q, true);
        let full = TensorI8::new(vec![h, wd, co], full, out_q).unwrap();
        let expect = pooling(&full, PoolKind::Max2x2).unwrap();
        let (y, _) = conv_maxpool_int8(&x, &as_sparse(&w, 2), out_q, true).unwrap();
        assert_eq!(y, expect);
    }
}

// -------------------------------------------------------------- dwconv

#[test]
fn dwconv_zero_weights_emit_zero_point() {
    let x = TensorI8::random(vec![4, 4, 5], qp(0.1, 0), 3);
    let w = QWeights::new(vec![5, 3, 3], vec![0; 45], qp(0.01, 0), vec![0; 5]).unwrap();
    let (y, _) = dwconv2d_int8(&x, &w, 1, qp(0.3, 17), false).unwrap();
    assert!(y.data().iter().all(|&v| v == 17));
}

#[test]
fn dwconv_single_kept_row_matches_oracle() {
    let mut r = rng(12);
    let c = 6;
    let mut w = vec![0i8; c * 9];
    for ch in 0..c {
        let row = ch % 3;
        for k in 0..3 {
            w[ch * 9 + row * 3 + k] = common::nonzero(&mut r);
        }
    }
    let bias: Vec<i32> = (0..c as i32).map(|i| i * 50 - 100).collect();
    let w = QWeights::new(vec![c, 3, 3], w, qp(0.01, 0), bias).unwrap();
    let in_q = qp(0.05, -3);
    let out_q = qp(0.1, 2);
    let x = TensorI8::random(vec![7, 5, c], in_q, 4);
    let (expect, _) = conv_oracle(x.data(), [7, 5, c], in_q, &w.dense_values(), w.qparams, c, 3, true, &w.bias, 1, out_q, false);
    let sparse = as_sparse(&w, 3);
    assert_eq!(dwconv2d_int8(&x, &sparse, 1, out_q, false).unwrap().0.data(), &expect[..]);
    assert_eq!(dwconv2d_int8(&x, &w, 1, out_q, false).unwrap().0.data(), &expect[..]);
}

#[test]
fn sparse_dwconv_equals_dense_oracle() {
    let mut r = rng(13);
    for case in 0..1000 {
        let rho = [0.3, 2.0 / 3.0, 0.9][case % 3];
        let (h, wd, c) = (r.gen_range(1..9), r.gen_range(1..9), r.gen_range(1..9));
        let stride = r.gen_range(1..=2);
        let in_q = random_q(&mut r, 0.01, 0.1);
        let out_q = random_q(&mut r, 0.02, 0.2);
        let relu = r.gen_bool(0.3);
        let x = TensorI8::random(vec![h, wd, c], in_q, r.gen());
        let w = pruned_weights(&mut r, vec![c, 3, 3], rho, 3);
        let (expect, _) =
            conv_oracle(x.data(), [h, wd, c], in_q, &w.dense_values(), w.qparams, c, 3, true, &w.bias, stride, out_q, relu);
        assert_eq!(dwconv2d_int8(&x, &w, stride, out_q, relu).unwrap().0.data(), &expect[..], "dense {case}");
        assert_eq!(dwconv2d_int8(&x, &as_sparse(&w, 3), stride, out_q, relu).unwrap().0.data(), &expect[..], "sparse {case}");
    }
}

// -------------------------------------------------------------- linear

#[test]
fn linear_identity_matrix_passes_input_through() {
    let n = 7;
    let mut w = vec![0i8; n * n];
    for i in 0..n {
        w[i * n + i] = 1;
    }
    let w = QWeights::new(vec![n, n], w, unit(), vec![0; n]).unwrap();
    let x = TensorI8::random(vec![3, n], unit(), 5);
    assert_eq!(linear_int8(&x, &w, unit(), false).unwrap().0.data(), x.data());
    assert_eq!(linear_int8(&x, &as_sparse(&w, 2), unit(), false).unwrap().0.data(), x.data());
}

#[test]
fn linear_zero_weights_requantize_bias() {
    let bias = vec![-5000, 0, 321, 77_777];
    let w = QWeights::new(vec![4, 6], vec![0; 24], qp(0.01, 0), bias.clone()).unwrap();
    let in_q = qp(0.05, 3);
    let out_q = qp(0.02, -1);
    let x = TensorI8::random(vec![2, 6], in_q, 6);
    let (y, _) = linear_int8(&x, &w, out_q, false).unwrap();
    let m = FixedMultiplier::from_scale(0.05 * 0.01 / 0.02);
    for row in y.data().chunks(4) {
        for (v, &b) in row.iter().zip(&bias) {
            assert_eq!(*v, requantize(b, m, -1));
        }
    }
}

#[test]
fn sparse_linear_equals_dense_oracle() {
    let mut r = rng(14);
    for case in 0..1000 {
        let rho = [0.3, 0.6, 0.9][case % 3];
        let b = [2, 4][r.gen_range(0..2)];
        let (rows, n_in, n_out) = (r.gen_range(1..6), r.gen_range(1..40), r.gen_range(1..12));
        let in_q = random_q(&mut r, 0.01, 0.1);
        let out_q = random_q(&mut r, 0.05, 0.5);
        let relu = r.gen_bool(0.5);
        let x = TensorI8::random(vec![rows, n_in], in_q, r.gen());
        let w = pruned_weights(&mut r, vec![n_out, n_in], rho, b);
        let expect = linear_oracle(x.data(), rows, in_q, &w.dense_values(), w.qparams, n_out, &w.bias, out_q, relu);
        assert_eq!(linear_int8(&x, &w, out_q, relu).unwrap().0.data(), &expect[..], "dense {case}");
        assert_eq!(linear_int8(&x, &as_sparse(&w, b), out_q, relu).unwrap().0.data(), &expect[..], "sparse {case}");
    }
}

// ----------------------------------------------------------- paired mac

#[test]
fn paired_mac_examples() {
    assert_eq!(paired_mac(0, [1, 1], [1, 1]), 2);
    assert_eq!(paired_mac(0, [-128, 127], [-128, 127]), 16384 + 16129);
}

#[test]
fn paired_mac_matches_two_scalar_macs() {
    let mut r = rng(15);
    for _ in 0..1_000_000 {
        let acc: i32 = r.gen_range(-(1 << 28)..(1 << 28));
        let w: [i8; 2] = [r.gen(), r.gen()];
        let x: [i8; 2] = [r.gen(), r.gen()];
        let scalar = acc + w[0] as i32 * x[0] as i32 + w[1] as i32 * x[1] as i32;
        assert_eq!(paired_mac(acc, w, x), scalar);
    }
}

// ------------------------------------------------------------ layernorm

#[test]
fn layernorm_constant_row_yields_beta() {
    let c = 10;
    let p = random_norm(&mut rng(16), c);
    let out_q = qp(1.0 / 32.0, 0);
    let x = TensorI8::new(vec![1, c], vec![-33; c], qp(0.07, 5)).unwrap();
    let y = scaled_layernorm(&x, &p, out_q).unwrap();
    let (_, beta) = real_norm(&p);
    let expect: Vec<i8> = beta.iter().map(|&b| quantize(b, out_q)).collect();
    assert_eq!(y.data(), &expect[..]);
}

#[test]
fn layernorm_two_channel_row() {
    let in_q = qp(1.0 / 100.0, 0);
    let x = TensorI8::new(vec![1, 2], vec![-100, 100], in_q).unwrap();
    let p = NormParams { gamma: vec![127, 127], beta: vec![0, 0], gamma_scale: 1.0 / 127.0 };
    let out_q = qp(1.0 / 64.0, 0);
    let y = scaled_layernorm(&x, &p, out_q).unwrap();
    for (&v, target) in y.data().iter().zip([-64, 64]) {
        assert!((v as i32 - target).abs() <= 1, "{v} vs {target}");
    }
}

#[test]
fn layernorm_within_two_steps_on_encoder_shapes() {
    let mut r = rng(17);
    for (t, c) in [(256, 44), (64, 192)] {
        for trial in 0..4 {
            let in_q = random_q(&mut r, 0.01, 0.2);
            let x = TensorI8::random(vec![t, c], in_q, r.gen());
            let p = random_norm(&mut r, c);
            let out_q = qp(1.0 / 32.0, r.gen_range(-10..=10));
            let y = scaled_layernorm(&x, &p, out_q).unwrap();
            let err = max_step_error(y.data(), &layernorm_oracle(&x, &p, out_q));
            assert!(err <= 2, "[{t}x{c}] trial {trial}: {err} steps");
        }
    }
}

#[test]
fn scaling_beats_direct_int16_rounding() {
    let mut r = rng(18);
    let c = 88;
    let x = skewed_rows(&mut r, 64, c, qp(0.05, 0));
    let p = NormParams { gamma: vec![127; c], beta: vec![0; c], gamma_scale: 1.0 / 127.0 };
    let out_q = qp(1.0 / 12.0, 0);
    let oracle = layernorm_oracle(&x, &p, out_q);
    let scaled = max_step_error(scaled_layernorm(&x, &p, out_q).unwrap().data(), &oracle);
    let plain = max_step_error(unscaled_layernorm(&x, &p, out_q).unwrap().data(), &oracle);
    assert!(scaled < plain, "scaled {scaled} vs unscaled {plain}");
    assert!(scaled <= 1);
}

// -------------------------------------------------------------- softmax

#[test]
fn softmax_of_four_equal_values_is_a_quarter() {
    let x = TensorI8::new(vec![4], vec![21; 4], qp(0.3, 0)).unwrap();
    let (y, _) = softmax_lut(&x).unwrap();
    assert_eq!(y.data(), &[-64; 4]);
    assert_eq!(y.qparams(), SOFTMAX_OUT_Q);
}

#[test]
fn softmax_of_one_value_saturates() {
    let x = TensorI8::new(vec![1], vec![-70], qp(0.3, 0)).unwrap();
    assert_eq!(softmax_lut(&x).unwrap().0.data(), &[127]);
}

#[test]
fn long_row_needs_at_most_one_exp_per_distinct_value() {
    let n = 65536;
    let mut r = rng(19);
    let x = TensorI8::new(vec![n], (0..n).map(|_| r.gen()).collect(), qp(0.05, 0)).unwrap();
    let (lut, evals) = softmax_lut(&x).unwrap();
    let (direct, direct_evals) = softmax_direct(&x).unwrap();
    assert!(evals <= 257);
    assert_eq!(direct_evals, n as u64);
    assert_eq!(lut, direct);
    assert_eq!(lut.data(), &softmax_int_oracle(x.data(), 0.05)[..]);
}

#[test]
fn lut_footprint_fits() {
    assert!(SoftmaxLut::footprint_bytes() <= 1228);
    assert_eq!(SOFTMAX_TABLE_LEN, 257);
}

#[test]
fn square_softmax_saves_two_hundred_fifty_fold_exp_calls() {
    let x = TensorI8::random(vec![256, 256], qp(1.0 / 16.0, 0), 20);
    let (a, lut_evals) = softmax_lut(&x).unwrap();
    let (b, direct_evals) = softmax_direct(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(direct_evals, 65536);
    assert!(direct_evals as f64 / lut_evals as f64 >= 250.0);
}

proptest! {
    #[test]
    fn softmax_equals_lut_free_oracle(row in prop::collection::vec(any::<i8>(), 1..300), scale in 0.005f32..0.5) {
        let x = TensorI8::new(vec![row.len()], row.clone(), qp(scale, 0)).unwrap();
        let (y, evals) = softmax_lut(&x).unwrap();
        prop_assert!(evals as usize <= row.len().min(257));
        prop_assert_eq!(y.data(), &softmax_int_oracle(&row, scale)[..]);
        // And within one step of the real-valued softmax.
        let real: Vec<f64> = row.iter().map(|&v| v as f64 * scale as f64).collect();
        for (&q, p) in y.data().iter().zip(softmax_f64(&real)) {
            prop_assert!((q as f64 - (p * 256.0 - 128.0).min(127.0)).abs() <= 1.0);
        }
    }

    #[test]
    fn kernels_are_pure(seed in any::<u64>()) {
        let x = TensorI8::random(vec![6, 6, 4], qp(0.05, 1), seed);
        let w = pruned_weights(&mut rng(seed), vec![3, 3, 3, 4], 0.5, 2);
        let s = as_sparse(&w, 2);
        prop_assert_eq!(conv2d_int8(&x, &s, 1, qp(0.2, 0), true).unwrap(), conv2d_int8(&x, &s, 1, qp(0.2, 0), true).unwrap());
        let t = TensorI8::random(vec![8, 16], qp(0.1, 0), seed);
        prop_assert_eq!(softmax_lut(&t).unwrap(), softmax_lut(&t).unwrap());
    }

    #[test]
    fn residual_add_saturates(a in prop::collection::vec(any::<i8>(), 1..64), seed in any::<u64>()) {
        let b = TensorI8::random(vec![a.len()], qp(0.1, 0), seed);
        let a = TensorI8::new(vec![a.len()], a, qp(0.1, 0)).unwrap();
        let y = residual_add(&a, &b, qp(0.1, 0)).unwrap();
        for ((&x, &z), &o) in a.data().iter().zip(b.data()).zip(y.data()) {
            prop_assert_eq!(o as i32, (x as i32 + z as i32).clamp(-128, 127));
        }
    }
}

// -------------------------------------------------------------- pooling

#[test]
fn maxpool_of_constant_is_constant() {
    let x = TensorI8::new(vec![6, 4, 2], vec![9; 48], qp(0.5, 1)).unwrap();
    let y = pooling(&x, PoolKind::Max2x2).unwrap();
    assert_eq!(y.shape(), &[3, 2, 2]);
    assert!(y.data().iter().all(|&v| v == 9));
}

#[test]
fn avgpool_rounds_half_away_from_zero() {
    let x = TensorI8::new(vec![2, 2, 1], vec![0, 0, 0, 4], unit()).unwrap();
    assert_eq!(pooling(&x, PoolKind::Avg2x2 { out_q: unit() }).unwrap().data(), &[1]);
    let x = TensorI8::new(vec![2, 2, 1], vec![0, 0, 0, -2], unit()).unwrap();
    assert_eq!(pooling(&x, PoolKind::Avg2x2 { out_q: unit() }).unwrap().data(), &[-1]);
}

#[test]
fn odd_spatial_dims_are_rejected() {
    let x = TensorI8::zeros(vec![3, 4, 1], unit());
    assert!(pooling(&x, PoolKind::Max2x2).is_err());
}

#[test]
fn seqpool_with_uniform_logits_averages_tokens() {
    let mut r = rng(21);
    let (t, c) = (12, 9);
    let in_q = qp(0.04, -2);
    let x = TensorI8::random(vec![t, c], in_q, 22);
    // A zero scorer makes every logit equal.
    let attn = QWeights::new(vec![1, c], vec![0; c], qp(0.01, 0), vec![r.gen_range(-50..50)]).unwrap();
    let out_q = qp(0.03, 1);
    let y = pooling(&x, PoolKind::Seq { attn: &attn, logit_q: qp(0.1, 0), out_q }).unwrap();
    for ch in 0..c {
        let mean = (0..t).map(|k| dequantize(x.data()[k * c + ch], in_q)).sum::<f64>() / t as f64;
        let expect = quantize(mean, out_q) as i32;
        assert!((y.data()[ch] as i32 - expect).abs() <= 1, "channel {ch}");
    }
}

// -------------------------------------------------------------- encoder

fn encoder_params(t: usize, c: usize, heads: usize, hidden: usize, seed: u64) -> (EncoderParams, QuantParams, QuantParams) {
    let in_q = qp(1.0 / 32.0, 0);
    let mut g = ModelGraph::new(vec![t, c], in_q);
    let attrs = LayerAttrs { heads: Some(heads), hidden: Some(hidden), ..Default::default() };
    g.push(LayerSpec::chain(LayerKind::Encoder, attrs, NodeRef::Input));
    let g = random_weights(&g, seed).unwrap();
    let Some(LayerParams::Encoder(e)) = &g.layers[0].params else { unreachable!() };
    ((**e).clone(), in_q, g.layers[0].out_q)
}

fn real_linear(x: &[f64], rows: usize, w: &QWeights, in_scale: f64, relu: bool) -> Vec<f64> {
    let (n_out, n_in) = (w.shape[0], w.shape[1]);
    let ws = w.qparams.scale as f64;
    let wd = w.dense_values();
    let mut y = vec![0.0; rows * n_out];
    for r in 0..rows {
        for o in 0..n_out {
            let mut s = w.bias[o] as f64 * in_scale * ws;
            for i in 0..n_in {
                s += wd[o * n_in + i] as f64 * ws * x[r * n_in + i];
            }
            y[r * n_out + o] = if relu { s.max(0.0) } else { s };
        }
    }
    y
}

fn real_ln(x: &[f64], c: usize, p: &NormParams, in_scale: f64) -> Vec<f64> {
    let (g, b) = real_norm(p);
    x.chunks(c).flat_map(|row| layernorm_f64(row, &g, &b, in_scale * in_scale)).collect()
}

/// Float pre-norm encoder over dequantized parameters. Bias scales follow
/// the quantized input scale of each projection.
fn encoder_float(x: &[f64], t: usize, c: usize, e: &EncoderParams, in_q: QuantParams) -> Vec<f64> {
    let ln1 = real_ln(x, c, &e.ln1.norm, in_q.scale as f64);
    let s_ln1 = e.ln1.out_q.scale as f64;
    let q = real_linear(&ln1, t, &e.wq.weights, s_ln1, false);
    let k = real_linear(&ln1, t, &e.wk.weights, s_ln1, false);
    let v = real_linear(&ln1, t, &e.wv.weights, s_ln1, false);
    let dh = c / e.heads;
    let mut heads = vec![0.0; t * c];
    for h in 0..e.heads {
        let off = h * dh;
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| (0..dh).map(|d| q[i * c + off + d] * k[j * c + off + d]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let p = softmax_f64(&scores);
            for d in 0..dh {
                heads[i * c + off + d] = (0..t).map(|j| p[j] * v[j * c + off + d]).sum();
            }
        }
    }
    let proj = real_linear(&heads, t, &e.proj.weights, e.attn_q.scale as f64, false);
    let x1: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();
    let ln2 = real_ln(&x1, c, &e.ln2.norm, e.resid_q.scale as f64);
    let h1 = real_linear(&ln2, t, &e.fc1.weights, e.ln2.out_q.scale as f64, true);
    let h2 = real_linear(&h1, t, &e.fc2.weights, e.fc1.out_q.scale as f64, false);
    x1.iter().zip(&h2).map(|(a, b)| a + b).collect()
}

#[test]
fn encoder_with_zero_branches_is_identity() {
    let (t, c) = (8, 16);
    let (mut e, in_q, _) = encoder_params(t, c, 2, 32, 23);
    for l in e.linears_mut() {
        let n = l.weights.numel();
        l.weights = QWeights::new(l.weights.shape.clone(), vec![0; n], l.weights.qparams, vec![0; l.weights.out_dim()]).unwrap();
    }
    e.resid_q = in_q;
    let x = TensorI8::random(vec![t, c], in_q, 24);
    let (y, _) = encoder_forward(&x, &e, in_q).unwrap();
    assert!(max_step_error(y.data(), x.data()) <= 1);
}

#[test]
fn single_token_attention_passes_values_through() {
    let c = 8;
    let (e, in_q, out_q) = encoder_params(1, c, 1, 16, 25);
    let x = TensorI8::random(vec![1, c], in_q, 26);
    let (y, _) = encoder_forward(&x, &e, out_q).unwrap();

    // With one token the attention weight is exactly 1: the head output is
    // the value projection rescaled into the attention quantization.
    let ln1 = scaled_layernorm(&x, &e.ln1.norm, e.ln1.out_q).unwrap();
    let (v, _) = linear_int8(&ln1, &e.wv.weights, e.wv.out_q, false).unwrap();
    let m = FixedMultiplier::from_scale(e.wv.out_q.scale as f64 / e.attn_q.scale as f64);
    let heads: Vec<i8> = v
        .data()
        .iter()
        .map(|&a| requantize(a as i32 - e.wv.out_q.zero_point as i32, m, e.attn_q.zero_point))
        .collect();
    let heads = TensorI8::new(vec![1, c], heads, e.attn_q).unwrap();
    let (proj, _) = linear_int8(&heads, &e.proj.weights, e.proj.out_q, false).unwrap();
    let x1 = residual_add(&x, &proj, e.resid_q).unwrap();
    let ln2 = scaled_layernorm(&x1, &e.ln2.norm, e.ln2.out_q).unwrap();
    let (h, _) = linear_int8(&ln2, &e.fc1.weights, e.fc1.out_q, true).unwrap();
    let (f, _) = linear_int8(&h, &e.fc2.weights, e.fc2.out_q, false).unwrap();
    let expect = residual_add(&x1, &f, out_q).unwrap();
    assert_eq!(y, expect);
}

#[test]
fn random_encoder_tracks_float_oracle() {
    let (t, c) = (8, 16);
    let mut close = 0;
    let mut total = 0;
    for seed in 0..20 {
        let (e, in_q, out_q) = encoder_params(t, c, 2, 32, 100 + seed);
        let x = TensorI8::random(vec![t, c], in_q, 200 + seed);
        let (y, _) = encoder_forward(&x, &e, out_q).unwrap();
        let real: Vec<f64> = x.data().iter().map(|&v| dequantize(v, in_q)).collect();
        let expect: Vec<i8> = encoder_float(&real, t, c, &e, in_q).into_iter().map(|v| quantize(v, out_q)).collect();
        for (&a, &b) in y.data().iter().zip(&expect) {
            total += 1;
            if (a as i32 - b as i32).abs() <= 3 {
                close += 1;
            }
        }
    }
    let frac = close as f64 / total as f64;
    assert!(frac >= 0.95, "only {:.1}% within 3 steps", 100.0 * frac);
}

#[test]
fn encoder_counts_softmax_exp_calls() {
    let (e, in_q, out_q) = encoder_params(16, 16, 4, 32, 27);
    let x = TensorI8::random(vec![16, 16], in_q, 28);
    let (_, ctr) = encoder_forward(&x, &e, out_q).unwrap();
    assert!(ctr.exp_evals >= 1 && ctr.exp_evals <= 257);
    assert!(ctr.macs > 0);
}
