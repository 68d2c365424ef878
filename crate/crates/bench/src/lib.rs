//! Fixtures shared by the kernel benchmarks.

use sparsekit_core::ir::{random_weights, LayerAttrs, LayerKind, LayerSpec, NodeRef};
use sparsekit_core::params::{LayerParams, QWeights};
use sparsekit_core::runtime::compile_weights;
use sparsekit_core::{ModelGraph, QuantParams, SparseConfig, TensorI8};

/// One weighted layer, pruned, in both dense and run-length storage.
pub struct LayerCase {
    pub input: TensorI8,
    /// Pruned weights kept in dense storage.
    pub dense: QWeights,
    /// The same pruned weights, adaptively stored.
    pub sparse: QWeights,
    pub out_q: QuantParams,
}

fn build(input_shape: Vec<usize>, kind: LayerKind, attrs: LayerAttrs, sparsity: f64, block: usize, seed: u64) -> LayerCase {
    let q = QuantParams { scale: 1.0 / 64.0, zero_point: 0 };
    let mut g = ModelGraph::new(input_shape.clone(), q);
    g.push(LayerSpec::chain(kind, attrs, NodeRef::Input));
    let g = random_weights(&g, seed).expect("valid fixture");
    let layer = &g.layers[0];
    let Some(LayerParams::Weights(w)) = &layer.params else { unreachable!("weighted layer") };
    let cfg = SparseConfig::new(sparsity, block).expect("valid sparsity");
    let sparse = compile_weights(w, Some(&cfg));
    LayerCase { input: TensorI8::random(input_shape, q, seed ^ 1), dense: sparse.densified(), sparse, out_q: layer.out_q }
}

/// `hw x hw x cin` input into a 3x3, stride-1 convolution with `cout` filters.
pub fn conv_case(hw: usize, cin: usize, cout: usize, sparsity: f64, seed: u64) -> LayerCase {
    let attrs = LayerAttrs { out_channels: Some(cout), relu: true, ..Default::default() };
    build(vec![hw, hw, cin], LayerKind::Conv3x3, attrs, sparsity, 4, seed)
}

/// Depthwise 3x3 convolution over `hw x hw x c`; blocks are kernel rows.
pub fn dwconv_case(hw: usize, c: usize, sparsity: f64, seed: u64) -> LayerCase {
    build(vec![hw, hw, c], LayerKind::DWConv3x3, LayerAttrs::default(), sparsity, 3, seed)
}

/// `rows x n_in` tokens through an `n_in -> n_out` projection.
pub fn linear_case(rows: usize, n_in: usize, n_out: usize, sparsity: f64, seed: u64) -> LayerCase {
    let attrs = LayerAttrs { out_features: Some(n_out), ..Default::default() };
    build(vec![rows, n_in], LayerKind::Linear, attrs, sparsity, 4, seed)
}

/// Square softmax input with a scale that spreads logits over a few units.
pub fn softmax_input(n: usize, seed: u64) -> TensorI8 {
    TensorI8::random(vec![n, n], QuantParams { scale: 1.0 / 16.0, zero_point: 0 }, seed)
}
