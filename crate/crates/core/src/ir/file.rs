//! Model description files: a TOML document plus a little-endian sidecar
//! holding the weight blobs.
//!
//! ```toml
//! weights = "model.bin"
//! input_shape = [32, 32, 3]
//! input_quant = { scale = 0.0078125, zero_point = 0 }
//!
//! [[layers]]
//! kind = "Conv3x3"
//! inputs = [-1]                 # -1 is the graph input; default: previous layer
//! attrs = { out_channels = 16, stride = 2, relu = true }
//! out_quant = { scale = 0.02, zero_point = 0 }
//! params.weight = { offset = 0, len = 432, dtype = "i8", shape = [16, 3, 3, 3], scale = 0.01 }
//! params.bias = { offset = 432, len = 64, dtype = "i32", shape = [16] }
//!
//! [[sparse_cfg]]
//! layer = 0
//! sparsity = 0.5
//! block_size = 2
//! ```
//!
//! Composite layers name their tensors `attn.weight` (sequence pooling),
//! `gamma`/`beta` (layer norm) and `wq.weight`, `ln1.gamma`, ... (encoder),
//! with the intermediate quantizations listed under `quant`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerAttrs, LayerKind, LayerSpec, ModelGraph, NodeRef};
use crate::codec::SparseConfig;
use crate::error::{Error, Result};
use crate::params::{EncoderParams, LayerParams, LinearParams, NormLayer, NormParams, QWeights};
use crate::tensor::QuantParams;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<String>,
    input_shape: Vec<usize>,
    input_quant: QuantParams,
    #[serde(default)]
    layers: Vec<LayerDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    sparse_cfg: Vec<SparseDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    inputs: Option<Vec<i64>>,
    #[serde(default)]
    attrs: LayerAttrs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_quant: Option<QuantParams>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    params: BTreeMap<String, BlobRef>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    quant: BTreeMap<String, QuantParams>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobRef {
    offset: usize,
    len: usize,
    dtype: String,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    zero_point: Option<i8>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SparseDoc {
    layer: usize,
    sparsity: f64,
    block_size: usize,
}

const ENCODER_LINEARS: [&str; 6] = ["wq", "wk", "wv", "proj", "fc1", "fc2"];

struct Ctx<'a> {
    layer: usize,
    doc: &'a LayerDoc,
    blob: &'a [u8],
}

impl Ctx<'_> {
    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::Parse(format!("layers[{}] ({}): {msg}", self.layer, self.doc.kind))
    }

    fn bytes(&self, name: &str, dtype: &str, width: usize) -> Result<(&BlobRef, &[u8])> {
        let r = self.doc.params.get(name).ok_or_else(|| self.err(format_args!("missing params.{name}")))?;
        if r.dtype != dtype {
            return Err(match r.dtype.as_str() {
                "f32" | "f16" | "f64" => self.err(format_args!("params.{name}: only integer tensors are supported, quantize to int8 first")),
                d => self.err(format_args!("params.{name}: dtype must be {dtype}, got {d:?}")),
            });
        }
        let n: usize = r.shape.iter().product();
        if r.len != n * width {
            return Err(self.err(format_args!("params.{name}: len {} does not match shape {:?}", r.len, r.shape)));
        }
        let end = r.offset.checked_add(r.len).filter(|&e| e <= self.blob.len()).ok_or_else(|| {
            self.err(format_args!("params.{name}: bytes {}..{} lie outside the {}-byte sidecar", r.offset, r.offset + r.len, self.blob.len()))
        })?;
        Ok((r, &self.blob[r.offset..end]))
    }

    fn i8s(&self, name: &str) -> Result<(&BlobRef, Vec<i8>)> {
        let (r, b) = self.bytes(name, "i8", 1)?;
        Ok((r, b.iter().map(|&v| v as i8).collect()))
    }

    fn i32s(&self, name: &str) -> Result<Vec<i32>> {
        let (_, b) = self.bytes(name, "i32", 4)?;
        Ok(b.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    fn scale(&self, name: &str, r: &BlobRef) -> Result<f32> {
        r.scale.filter(|s| s.is_finite() && *s > 0.0).ok_or_else(|| self.err(format_args!("params.{name}: positive scale required")))
    }

    fn weights(&self, prefix: &str) -> Result<QWeights> {
        let wname = format!("{prefix}weight");
        let (r, data) = self.i8s(&wname)?;
        let scale = self.scale(&wname, r)?;
        let bname = format!("{prefix}bias");
        let bias = if self.doc.params.contains_key(&bname) { self.i32s(&bname)? } else { vec![0; r.shape.first().copied().unwrap_or(0)] };
        let q = QuantParams { scale, zero_point: r.zero_point.unwrap_or(0) };
        QWeights::new(r.shape.clone(), data, q, bias).map_err(|e| self.err(e))
    }

    fn norm(&self, prefix: &str) -> Result<NormParams> {
        let gname = format!("{prefix}gamma");
        let (r, gamma) = self.i8s(&gname)?;
        let gamma_scale = self.scale(&gname, r)?;
        let beta = self.i32s(&format!("{prefix}beta"))?;
        Ok(NormParams { gamma, beta, gamma_scale })
    }

    fn quant(&self, name: &str) -> Result<QuantParams> {
        let q = *self.doc.quant.get(name).ok_or_else(|| self.err(format_args!("missing quant.{name}")))?;
        if !q.is_valid() {
            return Err(self.err(format_args!("quant.{name}: scale must be positive")));
        }
        Ok(q)
    }

    fn params(&self, kind: LayerKind) -> Result<Option<LayerParams>> {
        if self.doc.params.is_empty() {
            return Ok(None);
        }
        Ok(Some(match kind {
            LayerKind::Conv3x3 | LayerKind::Conv1x1 | LayerKind::DWConv3x3 | LayerKind::ConvMaxPool | LayerKind::Linear => {
                LayerParams::Weights(self.weights("")?)
            }
            LayerKind::SeqPool => LayerParams::SeqPool { attn: self.weights("attn.")?, logit_q: self.quant("logit")? },
            LayerKind::ScaledLayerNorm => LayerParams::Norm(self.norm("")?),
            LayerKind::Encoder => {
                let heads = self.doc.attrs.heads.ok_or_else(|| self.err("attrs.heads is required"))?;
                let lin = |n: &str| -> Result<LinearParams> {
                    Ok(LinearParams { weights: self.weights(&format!("{n}."))?, out_q: self.quant(n)? })
                };
                LayerParams::Encoder(Box::new(EncoderParams {
                    heads,
                    ln1: NormLayer { norm: self.norm("ln1.")?, out_q: self.quant("ln1")? },
                    wq: lin("wq")?,
                    wk: lin("wk")?,
                    wv: lin("wv")?,
                    score_q: self.quant("score")?,
                    attn_q: self.quant("attn")?,
                    proj: lin("proj")?,
                    resid_q: self.quant("resid")?,
                    ln2: NormLayer { norm: self.norm("ln2.")?, out_q: self.quant("ln2")? },
                    fc1: lin("fc1")?,
                    fc2: lin("fc2")?,
                }))
            }
            _ => return Err(self.err("this layer kind takes no parameters")),
        }))
    }
}

/// Builds a graph from model text and the sidecar bytes it references.
pub fn parse_model(text: &str, sidecar: &[u8]) -> Result<ModelGraph> {
    let doc: ModelDoc = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    if !doc.input_quant.is_valid() {
        return Err(Error::Parse("input_quant: scale must be positive".into()));
    }
    let mut g = ModelGraph::new(doc.input_shape.clone(), doc.input_quant);
    for (i, ld) in doc.layers.iter().enumerate() {
        let ctx = Ctx { layer: i, doc: ld, blob: sidecar };
        let kind = LayerKind::from_name(&ld.kind).ok_or_else(|| ctx.err("unknown layer kind"))?;
        let inputs = match &ld.inputs {
            None => vec![g.last()],
            Some(v) => v
                .iter()
                .map(|&r| NodeRef::from_i64(r).ok_or_else(|| ctx.err(format_args!("input reference {r} is invalid"))))
                .collect::<Result<_>>()?,
        };
        let mut l = LayerSpec::new(kind, ld.attrs.clone(), inputs);
        l.params = ctx.params(kind)?;
        if let Some(q) = ld.out_quant {
            if !q.is_valid() {
                return Err(ctx.err("out_quant: scale must be positive"));
            }
            l.out_q = q;
        }
        g.layers.push(l);
    }
    for (k, s) in doc.sparse_cfg.iter().enumerate() {
        let layer = g
            .layers
            .get_mut(s.layer)
            .ok_or_else(|| Error::Parse(format!("sparse_cfg[{k}]: layer {} does not exist", s.layer)))?;
        let cfg = SparseConfig::new(s.sparsity, s.block_size).map_err(|e| Error::Parse(format!("sparse_cfg[{k}]: {e}")))?;
        layer.sparse_cfg = Some(cfg);
    }
    Ok(g)
}

/// Reads a model file; the sidecar path is resolved next to it.
pub fn load_model(path: &Path) -> Result<ModelGraph> {
    let text = std::fs::read_to_string(path)?;
    let name: Option<String> = toml::from_str::<toml::Table>(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .get("weights")
        .and_then(|v| v.as_str().map(str::to_owned));
    let sidecar = match name {
        Some(n) => std::fs::read(path.parent().unwrap_or(Path::new(".")).join(n))?,
        None => Vec::new(),
    };
    parse_model(&text, &sidecar).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

struct Writer {
    blob: Vec<u8>,
}

impl Writer {
    fn put(&mut self, dtype: &str, shape: Vec<usize>, bytes: Vec<u8>, scale: Option<f32>, zp: Option<i8>) -> BlobRef {
        let r = BlobRef { offset: self.blob.len(), len: bytes.len(), dtype: dtype.into(), shape, scale, zero_point: zp };
        self.blob.extend(bytes);
        r
    }

    fn weights(&mut self, out: &mut BTreeMap<String, BlobRef>, prefix: &str, w: &QWeights) {
        let data = w.dense_values().iter().map(|&v| v as u8).collect();
        let zp = (w.qparams.zero_point != 0).then_some(w.qparams.zero_point);
        out.insert(format!("{prefix}weight"), self.put("i8", w.shape.clone(), data, Some(w.qparams.scale), zp));
        let bias = w.bias.iter().flat_map(|b| b.to_le_bytes()).collect();
        out.insert(format!("{prefix}bias"), self.put("i32", vec![w.bias.len()], bias, None, None));
    }

    fn norm(&mut self, out: &mut BTreeMap<String, BlobRef>, prefix: &str, n: &NormParams) {
        let g = n.gamma.iter().map(|&v| v as u8).collect();
        out.insert(format!("{prefix}gamma"), self.put("i8", vec![n.gamma.len()], g, Some(n.gamma_scale), None));
        let b = n.beta.iter().flat_map(|b| b.to_le_bytes()).collect();
        out.insert(format!("{prefix}beta"), self.put("i32", vec![n.beta.len()], b, None, None));
    }
}

/// Serializes a graph into model text and sidecar bytes. Sparse weights are
/// written densely; their configurations go to `sparse_cfg`.
pub fn to_model_files(graph: &ModelGraph, sidecar_name: &str) -> Result<(String, Vec<u8>)> {
    let mut w = Writer { blob: Vec::new() };
    let mut layers = Vec::with_capacity(graph.layers.len());
    for (i, l) in graph.layers.iter().enumerate() {
        let mut params = BTreeMap::new();
        let mut quant = BTreeMap::new();
        match &l.params {
            None => {}
            Some(LayerParams::Weights(q)) => w.weights(&mut params, "", q),
            Some(LayerParams::SeqPool { attn, logit_q }) => {
                w.weights(&mut params, "attn.", attn);
                quant.insert("logit".to_string(), *logit_q);
            }
            Some(LayerParams::Norm(n)) => w.norm(&mut params, "", n),
            Some(LayerParams::Encoder(e)) => {
                for (name, lin) in ENCODER_LINEARS.iter().zip(e.linears()) {
                    w.weights(&mut params, &format!("{name}."), &lin.weights);
                    quant.insert(name.to_string(), lin.out_q);
                }
                w.norm(&mut params, "ln1.", &e.ln1.norm);
                w.norm(&mut params, "ln2.", &e.ln2.norm);
                for (name, q) in [("ln1", e.ln1.out_q), ("ln2", e.ln2.out_q), ("score", e.score_q), ("attn", e.attn_q), ("resid", e.resid_q)] {
                    quant.insert(name.to_string(), q);
                }
                if l.attrs.heads != Some(e.heads) {
                    return Err(Error::InvalidGraph(format!("layer {i}: encoder attrs.heads must match its parameters")));
                }
            }
        }
        layers.push(LayerDoc {
            kind: l.kind.name().to_string(),
            inputs: Some(l.inputs.iter().map(|r| r.to_i64()).collect()),
            attrs: l.attrs.clone(),
            out_quant: Some(l.out_q),
            params,
            quant,
        });
    }
    let sparse_cfg = graph
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.sparse_cfg.map(|c| SparseDoc { layer: i, sparsity: c.sparsity, block_size: c.block_size }))
        .collect();
    let doc = ModelDoc {
        weights: (!w.blob.is_empty()).then(|| sidecar_name.to_string()),
        input_shape: graph.input_shape.clone(),
        input_quant: graph.input_q,
        layers,
        sparse_cfg,
    };
    let text = toml::to_string(&doc).map_err(|e| Error::Parse(e.to_string()))?;
    Ok((text, w.blob))
}

/// Writes `path` and a `.bin` sidecar beside it.
pub fn save_model(graph: &ModelGraph, path: &Path) -> Result<()> {
    let sidecar = path.with_extension("bin");
    let name = sidecar.file_name().and_then(|n| n.to_str()).unwrap_or("weights.bin").to_string();
    let (text, blob) = to_model_files(graph, &name)?;
    std::fs::write(path, text)?;
    if !blob.is_empty() {
        std::fs::write(sidecar, blob)?;
    }
    Ok(())
}
