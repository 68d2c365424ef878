use super::{LayerKind, LayerSpec, ModelGraph, NodeRef};
use crate::error::{Error, Result};
use crate::params::LayerParams;

/// Shape of one parameter tensor a layer carries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightSpec {
    pub name: &'static str,
    pub shape: Vec<usize>,
    /// Subject to pruning and run-length coding.
    pub prunable: bool,
}

impl WeightSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Everything a layer stores besides its output quantization.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParamLayout {
    pub tensors: Vec<WeightSpec>,
    /// Biases and norm affine terms, in bytes.
    pub aux_bytes: usize,
    /// Stored quantization parameter sets.
    pub qparams: usize,
}

fn mismatch(layer: &LayerSpec, msg: impl std::fmt::Display) -> Error {
    Error::ShapeMismatch(format!("{}: {msg}", layer.kind))
}

fn hwc(layer: &LayerSpec, s: &[usize]) -> Result<[usize; 3]> {
    match *s {
        [h, w, c] if h > 0 && w > 0 && c > 0 => Ok([h, w, c]),
        _ => Err(mismatch(layer, format_args!("expects a non-empty [H, W, C] input, got {s:?}"))),
    }
}

fn tokens(layer: &LayerSpec, s: &[usize]) -> Result<(usize, usize)> {
    match s.last() {
        Some(&c) if s.len() >= 2 && c > 0 && s.iter().all(|&d| d > 0) => Ok((s.iter().product::<usize>() / c, c)),
        _ => Err(mismatch(layer, format_args!("expects a tokens x channels input, got {s:?}"))),
    }
}

fn weight_dim(layer: &LayerSpec, axis: usize) -> Option<usize> {
    match &layer.params {
        Some(LayerParams::Weights(w)) => w.shape.get(axis).copied(),
        _ => None,
    }
}

fn out_channels(layer: &LayerSpec) -> Result<usize> {
    layer
        .attrs
        .out_channels
        .or_else(|| weight_dim(layer, 0))
        .filter(|&c| c > 0)
        .ok_or_else(|| mismatch(layer, "output channel count is not set"))
}

fn linear_dims(layer: &LayerSpec, in_shape: &[usize]) -> Result<(usize, usize)> {
    let n_in = if layer.attrs.flatten {
        in_shape.iter().product()
    } else {
        *in_shape.last().ok_or_else(|| mismatch(layer, "input is a scalar"))?
    };
    let n_out = layer
        .attrs
        .out_features
        .or_else(|| weight_dim(layer, 0))
        .filter(|&c| c > 0)
        .ok_or_else(|| mismatch(layer, "output feature count is not set"))?;
    Ok((n_in, n_out))
}

fn encoder_dims(layer: &LayerSpec, c: usize) -> Result<(usize, usize)> {
    let from_params = match &layer.params {
        Some(LayerParams::Encoder(e)) => Some((e.heads, e.hidden())),
        _ => None,
    };
    let heads = layer.attrs.heads.or(from_params.map(|p| p.0)).unwrap_or(0);
    let hidden = layer.attrs.hidden.or(from_params.map(|p| p.1)).unwrap_or(0);
    if heads == 0 || c % heads != 0 {
        return Err(mismatch(layer, format_args!("{heads} heads do not divide {c} channels")));
    }
    if hidden == 0 {
        return Err(mismatch(layer, "hidden width is not set"));
    }
    Ok((heads, hidden))
}

/// Output shape of `layer` given the shapes of its inputs.
pub fn layer_output_shape(layer: &LayerSpec, inputs: &[&[usize]]) -> Result<Vec<usize>> {
    let want = if layer.kind == LayerKind::ResidualAdd { 2 } else { 1 };
    if inputs.len() != want {
        return Err(mismatch(layer, format_args!("takes {want} inputs, got {}", inputs.len())));
    }
    let s = inputs[0];
    let stride = layer.attrs.stride();
    let spatial = |d: usize| (d - 1) / stride + 1;
    Ok(match layer.kind {
        LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
            let [h, w, _] = hwc(layer, s)?;
            vec![spatial(h), spatial(w), out_channels(layer)?]
        }
        LayerKind::DWConv3x3 => {
            let [h, w, c] = hwc(layer, s)?;
            vec![spatial(h), spatial(w), c]
        }
        LayerKind::ConvMaxPool => {
            let [h, w, _] = hwc(layer, s)?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(mismatch(layer, format_args!("needs even spatial dims, got {h}x{w}")));
            }
            vec![h / 2, w / 2, out_channels(layer)?]
        }
        LayerKind::MaxPool2x2 | LayerKind::AvgPool2x2 => {
            let [h, w, c] = hwc(layer, s)?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(mismatch(layer, format_args!("needs even spatial dims, got {h}x{w}")));
            }
            vec![h / 2, w / 2, c]
        }
        LayerKind::Linear => {
            let (n_in, n_out) = linear_dims(layer, s)?;
            if let Some(k) = weight_dim(layer, 1) {
                if k != n_in {
                    return Err(mismatch(layer, format_args!("weights take {k} features but the input provides {n_in}")));
                }
            }
            if layer.attrs.flatten {
                vec![n_out]
            } else {
                let mut o = s.to_vec();
                *o.last_mut().unwrap() = n_out;
                o
            }
        }
        LayerKind::SeqPool => vec![tokens(layer, s)?.1],
        LayerKind::Encoder => {
            let (_, c) = tokens(layer, s)?;
            encoder_dims(layer, c)?;
            s.to_vec()
        }
        LayerKind::ScaledLayerNorm | LayerKind::Softmax | LayerKind::ReLU => {
            if s.is_empty() || s.contains(&0) {
                return Err(mismatch(layer, format_args!("needs a non-empty input, got {s:?}")));
            }
            s.to_vec()
        }
        LayerKind::ResidualAdd => {
            if inputs[0] != inputs[1] {
                return Err(mismatch(layer, format_args!("operands differ: {:?} vs {:?}", inputs[0], inputs[1])));
            }
            s.to_vec()
        }
    })
}

/// Parameter tensors `layer` needs for input shape `in_shape`.
pub fn weight_specs(layer: &LayerSpec, in_shape: &[usize]) -> Result<ParamLayout> {
    let w = |name, shape: Vec<usize>| WeightSpec { name, shape, prunable: true };
    Ok(match layer.kind {
        LayerKind::Conv3x3 | LayerKind::ConvMaxPool | LayerKind::Conv1x1 => {
            let [_, _, ci] = hwc(layer, in_shape)?;
            let co = out_channels(layer)?;
            let k = if layer.kind == LayerKind::Conv1x1 { 1 } else { 3 };
            ParamLayout { tensors: vec![w("weight", vec![co, k, k, ci])], aux_bytes: 4 * co, qparams: 1 }
        }
        LayerKind::DWConv3x3 => {
            let [_, _, c] = hwc(layer, in_shape)?;
            ParamLayout { tensors: vec![w("weight", vec![c, 3, 3])], aux_bytes: 4 * c, qparams: 1 }
        }
        LayerKind::Linear => {
            let (n_in, n_out) = linear_dims(layer, in_shape)?;
            ParamLayout { tensors: vec![w("weight", vec![n_out, n_in])], aux_bytes: 4 * n_out, qparams: 1 }
        }
        LayerKind::SeqPool => {
            let (_, c) = tokens(layer, in_shape)?;
            ParamLayout {
                tensors: vec![WeightSpec { name: "attn", shape: vec![1, c], prunable: false }],
                aux_bytes: 4,
                qparams: 2,
            }
        }
        LayerKind::ScaledLayerNorm => {
            let c = *in_shape.last().ok_or_else(|| mismatch(layer, "input is a scalar"))?;
            ParamLayout { tensors: vec![], aux_bytes: 5 * c, qparams: 1 }
        }
        LayerKind::Encoder => {
            let (_, c) = tokens(layer, in_shape)?;
            let (_, hidden) = encoder_dims(layer, c)?;
            ParamLayout {
                tensors: vec![
                    w("wq", vec![c, c]),
                    w("wk", vec![c, c]),
                    w("wv", vec![c, c]),
                    w("proj", vec![c, c]),
                    w("fc1", vec![hidden, c]),
                    w("fc2", vec![c, hidden]),
                ],
                aux_bytes: 4 * (5 * c + hidden) + 2 * 5 * c,
                qparams: 19,
            }
        }
        LayerKind::MaxPool2x2 | LayerKind::AvgPool2x2 | LayerKind::Softmax | LayerKind::ReLU | LayerKind::ResidualAdd => {
            ParamLayout::default()
        }
    })
}

/// Annotates every layer with its output shape.
///
/// Layers may only consume the graph input or earlier layers.
pub fn infer_shapes(graph: &ModelGraph) -> Result<ModelGraph> {
    let mut g = graph.clone();
    if g.input_shape.is_empty() {
        return Err(Error::ShapeMismatch("graph input shape is not set".into()));
    }
    for i in 0..g.layers.len() {
        let mut ins: Vec<Vec<usize>> = Vec::with_capacity(2);
        for r in &g.layers[i].inputs {
            let s = match *r {
                NodeRef::Input => g.input_shape.clone(),
                NodeRef::Layer(j) if j < i => g.layers[j].out_shape.clone().expect("earlier layer annotated"),
                NodeRef::Layer(j) => {
                    return Err(Error::InvalidGraph(format!("layer {i} consumes layer {j}, which does not precede it")))
                }
            };
            ins.push(s);
        }
        let refs: Vec<&[usize]> = ins.iter().map(|v| v.as_slice()).collect();
        let out = layer_output_shape(&g.layers[i], &refs).map_err(|e| match e {
            Error::ShapeMismatch(m) => Error::ShapeMismatch(format!("layer {i} {m}")),
            other => other,
        })?;
        g.layers[i].out_shape = Some(out);
    }
    Ok(g)
}
