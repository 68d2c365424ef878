use std::fmt;

use super::shapes::weight_specs;
use super::{infer_shapes, LayerKind, LayerSpec, ModelGraph, NodeRef};
use crate::kernels::SOFTMAX_OUT_Q;
use crate::params::{LayerParams, QWeights};

/// A broken graph or layer invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// Layers that lie on a dependency cycle.
    Cycle { layers: Vec<usize> },
    /// Input referring to a missing layer, or to one that runs later.
    BadReference { layer: usize, target: usize },
    FanIn { layer: usize, expected: usize, got: usize },
    FanOut { node: NodeRef, consumers: usize },
    /// Nodes without consumers other than the final layer.
    DanglingOutput { node: NodeRef },
    Shape { message: String },
    BlockSize { layer: usize, kind: LayerKind, block_size: usize },
    SparseConfig { layer: usize, message: String },
    Params { layer: usize, message: String },
    Quant { layer: usize, message: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Cycle { layers } => write!(f, "cycle through layers {layers:?}"),
            Violation::BadReference { layer, target } => {
                write!(f, "layer {layer} consumes layer {target}, which does not run before it")
            }
            Violation::FanIn { layer, expected, got } => write!(f, "layer {layer} has {got} inputs, expected {expected}"),
            Violation::FanOut { node, consumers } => write!(f, "node {} feeds {consumers} consumers (max 2)", node.to_i64()),
            Violation::DanglingOutput { node } => write!(f, "node {} is never consumed", node.to_i64()),
            Violation::Shape { message } => write!(f, "shape: {message}"),
            Violation::BlockSize { layer, kind: LayerKind::DWConv3x3, block_size } => {
                write!(f, "layer {layer}: dw block size must be 3, got {block_size}")
            }
            Violation::BlockSize { layer, kind, block_size } => {
                write!(f, "layer {layer}: {kind} block size must be 2 or 4, got {block_size}")
            }
            Violation::SparseConfig { layer, message } => write!(f, "layer {layer}: {message}"),
            Violation::Params { layer, message } => write!(f, "layer {layer} parameters: {message}"),
            Violation::Quant { layer, message } => write!(f, "layer {layer} quantization: {message}"),
        }
    }
}

/// Every invariant the graph breaks; empty when the graph is well formed.
pub fn validate_graph(graph: &ModelGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = graph.layers.len();
    let mut structural = false;

    for (i, l) in graph.layers.iter().enumerate() {
        let expected = if l.kind == LayerKind::ResidualAdd { 2 } else { 1 };
        if l.inputs.len() != expected {
            out.push(Violation::FanIn { layer: i, expected, got: l.inputs.len() });
            structural = true;
        }
    }

    if let Some(cycle) = find_cycle(graph) {
        out.push(Violation::Cycle { layers: cycle });
        structural = true;
    }
    for (i, l) in graph.layers.iter().enumerate() {
        for r in &l.inputs {
            if let NodeRef::Layer(j) = *r {
                if j >= i {
                    structural = true;
                    if j >= n || out.iter().all(|v| !matches!(v, Violation::Cycle { layers } if layers.contains(&i))) {
                        out.push(Violation::BadReference { layer: i, target: j });
                    }
                }
            }
        }
    }

    let fan = graph.fan_out();
    for (k, &c) in fan.iter().enumerate() {
        let node = if k == 0 { NodeRef::Input } else { NodeRef::Layer(k - 1) };
        if c > 2 {
            out.push(Violation::FanOut { node, consumers: c });
        }
        let is_output = k == n;
        if c == 0 && !is_output {
            out.push(Violation::DanglingOutput { node });
        }
    }

    for (i, l) in graph.layers.iter().enumerate() {
        check_sparse(i, l, &mut out);
    }

    if structural {
        return out;
    }
    match infer_shapes(graph) {
        Err(e) => out.push(Violation::Shape { message: e.to_string() }),
        Ok(g) => {
            for (i, l) in g.layers.iter().enumerate() {
                let in_shape = g.node_shape(l.inputs[0]).unwrap().to_vec();
                check_params(i, l, &in_shape, &mut out);
                check_quant(i, l, &g, &mut out);
            }
        }
    }
    out
}

/// Layers left over by Kahn's algorithm, if any.
fn find_cycle(graph: &ModelGraph) -> Option<Vec<usize>> {
    let n = graph.layers.len();
    let mut indeg = vec![0usize; n];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, l) in graph.layers.iter().enumerate() {
        for r in &l.inputs {
            if let NodeRef::Layer(j) = *r {
                if j < n {
                    indeg[i] += 1;
                    succ[j].push(i);
                }
            }
        }
    }
    let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut seen = 0;
    while let Some(i) = ready.pop() {
        seen += 1;
        for &s in &succ[i] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                ready.push(s);
            }
        }
    }
    (seen < n).then(|| (0..n).filter(|&i| indeg[i] > 0).collect())
}

fn check_sparse(i: usize, l: &LayerSpec, out: &mut Vec<Violation>) {
    let Some(cfg) = l.sparse_cfg else { return };
    if let Err(e) = cfg.check() {
        out.push(Violation::SparseConfig { layer: i, message: e.to_string() });
        return;
    }
    if !l.kind.is_prunable() {
        out.push(Violation::SparseConfig { layer: i, message: format!("{} layers carry no prunable weights", l.kind) });
        return;
    }
    let ok = match l.kind {
        LayerKind::DWConv3x3 => cfg.block_size == 3,
        _ => cfg.block_size == 2 || cfg.block_size == 4,
    };
    if !ok {
        out.push(Violation::BlockSize { layer: i, kind: l.kind, block_size: cfg.block_size });
    }
}

fn check_weights(i: usize, name: &str, w: &QWeights, shape: &[usize], out: &mut Vec<Violation>) {
    let mut bad = |message: String| out.push(Violation::Params { layer: i, message });
    if w.shape != shape {
        bad(format!("{name} has shape {:?}, expected {shape:?}", w.shape));
    }
    if w.store.element_len() != w.numel() {
        bad(format!("{name} stores {} values for shape {:?}", w.store.element_len(), w.shape));
    }
    if w.bias.len() != shape[0] {
        bad(format!("{name} bias has {} values, expected {}", w.bias.len(), shape[0]));
    }
    if w.qparams.zero_point != 0 {
        bad(format!("{name} zero point must be 0, got {}", w.qparams.zero_point));
    }
    if !w.qparams.is_valid() {
        bad(format!("{name} scale must be positive"));
    }
}

fn check_params(i: usize, l: &LayerSpec, in_shape: &[usize], out: &mut Vec<Violation>) {
    let Some(p) = &l.params else { return };
    let layout = match weight_specs(l, in_shape) {
        Ok(s) => s,
        Err(e) => {
            out.push(Violation::Shape { message: format!("layer {i}: {e}") });
            return;
        }
    };
    let c = in_shape.last().copied().unwrap_or(0);
    match (l.kind, p) {
        (
            LayerKind::Conv3x3 | LayerKind::Conv1x1 | LayerKind::DWConv3x3 | LayerKind::ConvMaxPool | LayerKind::Linear,
            LayerParams::Weights(w),
        ) => check_weights(i, "weight", w, &layout.tensors[0].shape, out),
        (LayerKind::SeqPool, LayerParams::SeqPool { attn, logit_q }) => {
            check_weights(i, "attn", attn, &layout.tensors[0].shape, out);
            if !logit_q.is_valid() {
                out.push(Violation::Quant { layer: i, message: "logit scale must be positive".into() });
            }
        }
        (LayerKind::ScaledLayerNorm, LayerParams::Norm(nrm)) => {
            if nrm.gamma.len() != c || nrm.beta.len() != c {
                out.push(Violation::Params { layer: i, message: format!("norm needs {c} gamma/beta values") });
            }
        }
        (LayerKind::Encoder, LayerParams::Encoder(e)) => {
            for (lin, spec) in e.linears().into_iter().zip(&layout.tensors) {
                check_weights(i, spec.name, &lin.weights, &spec.shape, out);
            }
            if l.attrs.heads.is_some_and(|h| h != e.heads) {
                out.push(Violation::Params { layer: i, message: format!("attrs say {:?} heads, params {}", l.attrs.heads, e.heads) });
            }
            for nrm in [&e.ln1.norm, &e.ln2.norm] {
                if nrm.gamma.len() != c || nrm.beta.len() != c {
                    out.push(Violation::Params { layer: i, message: format!("encoder norm needs {c} gamma/beta values") });
                }
            }
        }
        (kind, _) => out.push(Violation::Params { layer: i, message: format!("parameters do not fit a {kind} layer") }),
    }
}

fn check_quant(i: usize, l: &LayerSpec, g: &ModelGraph, out: &mut Vec<Violation>) {
    if !l.out_q.is_valid() {
        out.push(Violation::Quant { layer: i, message: "output scale must be positive".into() });
    }
    let in_q = g.node_q(l.inputs[0]).unwrap();
    match l.kind {
        LayerKind::MaxPool2x2 | LayerKind::ReLU if l.out_q != in_q => {
            out.push(Violation::Quant { layer: i, message: format!("{} must keep its input quantization", l.kind) })
        }
        LayerKind::Softmax if l.out_q != SOFTMAX_OUT_Q => {
            out.push(Violation::Quant { layer: i, message: "softmax output must use scale 1/256, zero point -128".into() })
        }
        _ => {}
    }
}
