//! Model intermediate representation.
//!
//! A [`ModelGraph`] is an ordered list of layers. Each layer names its
//! producers explicitly, which admits local residual edges while keeping
//! execution order equal to list order.

mod file;
mod init;
mod shapes;
mod supernet;
mod validate;

pub use file::{load_model, parse_model, save_model, to_model_files};
pub use init::random_weights;
pub use shapes::{infer_shapes, layer_output_shape, weight_specs, ParamLayout, WeightSpec};
pub use supernet::{
    build_path, enumerate_paths, sample_path, sample_single_path, BlockType, Candidate, ChoiceBlock, PathChoice,
    SupernetSpec,
};
pub use validate::{validate_graph, Violation};

use serde::{Deserialize, Serialize};

use crate::codec::SparseConfig;
use crate::params::LayerParams;
use crate::tensor::QuantParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Conv3x3,
    Conv1x1,
    DWConv3x3,
    Linear,
    MaxPool2x2,
    AvgPool2x2,
    SeqPool,
    ConvMaxPool,
    Encoder,
    ScaledLayerNorm,
    Softmax,
    ReLU,
    ResidualAdd,
}

impl LayerKind {
    pub const ALL: [LayerKind; 13] = [
        LayerKind::Conv3x3,
        LayerKind::Conv1x1,
        LayerKind::DWConv3x3,
        LayerKind::Linear,
        LayerKind::MaxPool2x2,
        LayerKind::AvgPool2x2,
        LayerKind::SeqPool,
        LayerKind::ConvMaxPool,
        LayerKind::Encoder,
        LayerKind::ScaledLayerNorm,
        LayerKind::Softmax,
        LayerKind::ReLU,
        LayerKind::ResidualAdd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv3x3 => "Conv3x3",
            LayerKind::Conv1x1 => "Conv1x1",
            LayerKind::DWConv3x3 => "DWConv3x3",
            LayerKind::Linear => "Linear",
            LayerKind::MaxPool2x2 => "MaxPool2x2",
            LayerKind::AvgPool2x2 => "AvgPool2x2",
            LayerKind::SeqPool => "SeqPool",
            LayerKind::ConvMaxPool => "ConvMaxPool",
            LayerKind::Encoder => "Encoder",
            LayerKind::ScaledLayerNorm => "ScaledLayerNorm",
            LayerKind::Softmax => "Softmax",
            LayerKind::ReLU => "ReLU",
            LayerKind::ResidualAdd => "ResidualAdd",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|&k| k == self).unwrap() as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    /// Kinds whose weights may be pruned and run-length coded.
    pub fn is_prunable(self) -> bool {
        matches!(
            self,
            LayerKind::Conv3x3 | LayerKind::Conv1x1 | LayerKind::DWConv3x3 | LayerKind::ConvMaxPool | LayerKind::Linear | LayerKind::Encoder
        )
    }
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Kind-specific attributes. Fields a kind does not use stay at defaults.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LayerAttrs {
    /// Output channels of a standard convolution.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    /// Spatial stride; 0 is read as 1.
    #[serde(skip_serializing_if = "is_zero")]
    pub stride: usize,
    #[serde(skip_serializing_if = "is_false")]
    pub relu: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    /// Encoder MLP width.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    /// Expansion factor of the inverted-residual block a layer belongs to.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expansion: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_features: Option<usize>,
    /// Linear over the whole flattened input rather than per row.
    #[serde(skip_serializing_if = "is_false")]
    pub flatten: bool,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

fn is_false(v: &bool) -> bool {
    !*v
}

impl LayerAttrs {
    pub fn stride(&self) -> usize {
        self.stride.max(1)
    }
}

/// Producer of a layer input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeRef {
    Input,
    Layer(usize),
}

impl NodeRef {
    /// `-1` for the graph input, the layer index otherwise.
    pub fn to_i64(self) -> i64 {
        match self {
            NodeRef::Input => -1,
            NodeRef::Layer(i) => i as i64,
        }
    }

    pub fn from_i64(v: i64) -> Option<Self> {
        match v {
            -1 => Some(NodeRef::Input),
            v if v >= 0 => Some(NodeRef::Layer(v as usize)),
            _ => None,
        }
    }
}

/// Which choice block and candidate produced a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockTag {
    pub block: usize,
    pub candidate: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub attrs: LayerAttrs,
    pub inputs: Vec<NodeRef>,
    pub params: Option<LayerParams>,
    pub out_q: QuantParams,
    pub sparse_cfg: Option<SparseConfig>,
    /// Filled in by [`infer_shapes`].
    pub out_shape: Option<Vec<usize>>,
    pub tag: Option<BlockTag>,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, attrs: LayerAttrs, inputs: Vec<NodeRef>) -> Self {
        Self {
            kind,
            attrs,
            inputs,
            params: None,
            out_q: QuantParams::unit(),
            sparse_cfg: None,
            out_shape: None,
            tag: None,
        }
    }

    /// Single-input layer fed by `input`.
    pub fn chain(kind: LayerKind, attrs: LayerAttrs, input: NodeRef) -> Self {
        Self::new(kind, attrs, vec![input])
    }

    pub fn with_params(mut self, params: LayerParams) -> Self {
        self.params = Some(params);
        self
    }

    pub fn with_out_q(mut self, q: QuantParams) -> Self {
        self.out_q = q;
        self
    }

    pub fn with_sparse(mut self, cfg: SparseConfig) -> Self {
        self.sparse_cfg = Some(cfg);
        self
    }
}

/// Layers in execution order; the last layer is the graph output.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub input_shape: Vec<usize>,
    pub input_q: QuantParams,
    pub layers: Vec<LayerSpec>,
}

impl ModelGraph {
    pub fn new(input_shape: Vec<usize>, input_q: QuantParams) -> Self {
        Self { input_shape, input_q, layers: Vec::new() }
    }

    /// Appends a layer and returns a reference to it.
    pub fn push(&mut self, layer: LayerSpec) -> NodeRef {
        self.layers.push(layer);
        NodeRef::Layer(self.layers.len() - 1)
    }

    /// The most recently added node (the graph input when empty).
    pub fn last(&self) -> NodeRef {
        match self.layers.len() {
            0 => NodeRef::Input,
            n => NodeRef::Layer(n - 1),
        }
    }

    pub fn output_shape(&self) -> Option<&[usize]> {
        match self.layers.last() {
            Some(l) => l.out_shape.as_deref(),
            None => Some(&self.input_shape),
        }
    }

    pub fn node_shape(&self, node: NodeRef) -> Option<&[usize]> {
        match node {
            NodeRef::Input => Some(&self.input_shape),
            NodeRef::Layer(i) => self.layers.get(i)?.out_shape.as_deref(),
        }
    }

    pub fn node_q(&self, node: NodeRef) -> Option<QuantParams> {
        match node {
            NodeRef::Input => Some(self.input_q),
            NodeRef::Layer(i) => self.layers.get(i).map(|l| l.out_q),
        }
    }

    pub fn profile(&self) -> SparseProfile {
        SparseProfile(self.layers.iter().map(|l| l.sparse_cfg).collect())
    }

    /// Copy of the graph with `profile` installed as per-layer configs.
    pub fn with_profile(&self, profile: &SparseProfile) -> Self {
        let mut g = self.clone();
        for (l, c) in g.layers.iter_mut().zip(&profile.0) {
            l.sparse_cfg = *c;
        }
        g
    }

    /// Number of consumers per node; index 0 is the graph input.
    pub fn fan_out(&self) -> Vec<usize> {
        let mut f = vec![0; self.layers.len() + 1];
        for l in &self.layers {
            for r in &l.inputs {
                match *r {
                    NodeRef::Input => f[0] += 1,
                    NodeRef::Layer(j) if j < self.layers.len() => f[j + 1] += 1,
                    NodeRef::Layer(_) => {}
                }
            }
        }
        f
    }

    /// Weight elements across all prunable tensors, before pruning.
    pub fn weight_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params.as_ref())
            .flat_map(|p| p.weight_tensors())
            .map(|w| w.numel())
            .sum()
    }
}

/// Per-layer sparse configuration, indexed like [`ModelGraph::layers`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseProfile(pub Vec<Option<SparseConfig>>);

impl SparseProfile {
    pub fn dense(n_layers: usize) -> Self {
        Self(vec![None; n_layers])
    }

    pub fn get(&self, layer: usize) -> Option<&SparseConfig> {
        self.0.get(layer).and_then(|c| c.as_ref())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}
