//! Quantized operator parameters shared by the IR, kernels and runtime.

use crate::codec::StoredWeights;
use crate::error::{Error, Result};
use crate::tensor::{QuantParams, TensorI8};

/// Weight tensor (dense or run-length coded) with its 32-bit bias.
///
/// Layouts, outermost dimension first:
/// conv `[C_out, k, k, C_in]`, depthwise `[C, 3, 3]`, linear `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QWeights {
    pub store: StoredWeights,
    pub shape: Vec<usize>,
    pub qparams: QuantParams,
    pub bias: Vec<i32>,
}

impl QWeights {
    pub fn new(shape: Vec<usize>, data: Vec<i8>, qparams: QuantParams, bias: Vec<i32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!("weight shape {shape:?} needs {n} values, got {}", data.len())));
        }
        if shape.first().copied() != Some(bias.len()) {
            return Err(Error::ShapeMismatch(format!(
                "bias has {} values for {} output channels",
                bias.len(),
                shape.first().copied().unwrap_or(0)
            )));
        }
        Ok(Self { store: StoredWeights::Dense(data), shape, qparams, bias })
    }

    pub fn from_tensor(t: TensorI8, bias: Vec<i32>) -> Result<Self> {
        let (shape, data, q) = t.into_parts();
        Self::new(shape, data, q, bias)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn out_dim(&self) -> usize {
        self.shape[0]
    }

    /// Elements per output channel.
    pub fn filter_len(&self) -> usize {
        self.numel() / self.out_dim().max(1)
    }

    pub fn dense_values(&self) -> Vec<i8> {
        self.store.to_dense()
    }

    pub fn to_tensor(&self) -> TensorI8 {
        TensorI8::new(self.shape.clone(), self.dense_values(), self.qparams).expect("consistent weights")
    }

    /// Same weights forced into dense storage.
    pub fn densified(&self) -> Self {
        Self { store: StoredWeights::Dense(self.dense_values()), ..self.clone() }
    }
}

/// A linear projection together with the quantization of its output.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weights: QWeights,
    pub out_q: QuantParams,
}

/// Integer layer-norm affine parameters.
///
/// `gamma` is INT8 at `gamma_scale`; `beta` is INT32 at `gamma_scale / 2^7`,
/// the scale of the product `(x_norm * 2^7) * gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: Vec<i8>,
    pub beta: Vec<i32>,
    pub gamma_scale: f32,
}

impl NormParams {
    /// `gamma_scale * 2^-7`; exact in binary floating point.
    pub fn folded_scale(&self) -> f32 {
        self.gamma_scale * (1.0 / 128.0)
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormLayer {
    pub norm: NormParams,
    pub out_q: QuantParams,
}

/// Pre-norm transformer encoder with ReLU MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub heads: usize,
    pub ln1: NormLayer,
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    /// Attention logits after the `1/sqrt(d_head)` fold.
    pub score_q: QuantParams,
    /// Per-head attention output before projection.
    pub attn_q: QuantParams,
    pub proj: LinearParams,
    /// First residual sum.
    pub resid_q: QuantParams,
    pub ln2: NormLayer,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl EncoderParams {
    pub fn hidden(&self) -> usize {
        self.fc1.weights.out_dim()
    }

    pub fn linears(&self) -> [&LinearParams; 6] {
        [&self.wq, &self.wk, &self.wv, &self.proj, &self.fc1, &self.fc2]
    }

    pub fn linears_mut(&mut self) -> [&mut LinearParams; 6] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.proj, &mut self.fc1, &mut self.fc2]
    }
}

/// Parameters attached to a layer, by operator family.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    /// Conv, depthwise conv, conv-maxpool and linear layers.
    Weights(QWeights),
    /// Attention-weighted token pooling: a `[1, C]` scoring projection.
    SeqPool { attn: QWeights, logit_q: QuantParams },
    Norm(NormParams),
    Encoder(Box<EncoderParams>),
}

impl LayerParams {
    /// Every weight tensor, in a fixed order.
    pub fn weight_tensors(&self) -> Vec<&QWeights> {
        match self {
            LayerParams::Weights(w) => vec![w],
            LayerParams::SeqPool { attn, .. } => vec![attn],
            LayerParams::Norm(_) => vec![],
            LayerParams::Encoder(e) => e.linears().into_iter().map(|l| &l.weights).collect(),
        }
    }

    /// Weight tensors subject to pruning and sparse coding.
    pub fn prunable_mut(&mut self) -> Vec<&mut QWeights> {
        match self {
            LayerParams::Weights(w) => vec![w],
            LayerParams::Encoder(e) => e.linears_mut().into_iter().map(|l| &mut l.weights).collect(),
            LayerParams::SeqPool { .. } | LayerParams::Norm(_) => vec![],
        }
    }

    pub fn prunable(&self) -> Vec<&QWeights> {
        match self {
            LayerParams::Weights(w) => vec![w],
            LayerParams::Encoder(e) => e.linears().into_iter().map(|l| &l.weights).collect(),
            LayerParams::SeqPool { .. } | LayerParams::Norm(_) => vec![],
        }
    }

    /// Quantization parameter sets stored alongside the weights (weight
    /// scales and intermediate activations, excluding the layer output).
    pub fn qparam_count(&self) -> usize {
        match self {
            LayerParams::Weights(_) => 1,
            LayerParams::SeqPool { .. } => 2,
            LayerParams::Norm(_) => 1,
            // 6 weight scales, 6 linear outputs, 2 norm outputs, 2 norm
            // gamma scales, score, attn, resid.
            LayerParams::Encoder(_) => 19,
        }
    }

    /// Bytes of non-weight integer payload (biases and norm affine terms).
    pub fn aux_bytes(&self) -> usize {
        match self {
            LayerParams::Weights(w) => 4 * w.bias.len(),
            LayerParams::SeqPool { attn, .. } => 4 * attn.bias.len(),
            LayerParams::Norm(n) => n.gamma.len() + 4 * n.beta.len(),
            LayerParams::Encoder(e) => {
                let lin: usize = e.linears().iter().map(|l| 4 * l.weights.bias.len()).sum();
                let norms = [&e.ln1, &e.ln2].iter().map(|n| n.norm.gamma.len() + 4 * n.norm.beta.len()).sum::<usize>();
                lin + norms
            }
        }
    }
}
