use serde::{Deserialize, Serialize};

use super::compile::compile_weights;
use super::plan::plan_memory;
use crate::codec::{estimate_stored_bytes, StoredWeights};
use crate::error::Result;
use crate::ir::{infer_shapes, weight_specs, LayerKind, ModelGraph, SparseProfile};
use crate::kernels::SoftmaxLut;

/// Fixed per-layer table cost charged to storage.
pub const LAYER_METADATA_BYTES: usize = 32;

/// Package header and graph-level fields.
pub const PACKAGE_HEADER_BYTES: usize = 64;

/// Memory held back for the softmax table and its bitmap.
pub const LUT_RESERVE_BYTES: usize = 1228;

const QPARAM_BYTES: usize = 8;

/// Storage and memory limits in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budgets {
    pub storage: usize,
    pub memory: usize,
}

impl Default for Budgets {
    /// 1 MB of flash and 320 KB of RAM.
    fn default() -> Self {
        Self { storage: 1_048_576, memory: 327_680 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerResource {
    pub kind: LayerKind,
    /// Weight elements before pruning.
    pub dense_bytes: usize,
    /// Weight bytes after adaptive coding, padding records included.
    pub stored_bytes: usize,
    /// Like `stored_bytes` but without gap-padding records.
    pub raw_bytes: usize,
    /// Unpruned weights.
    pub effective_params: usize,
    pub sparse: bool,
    /// Dense over stored weight bytes.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResourceReport {
    pub storage_bytes: usize,
    pub peak_memory_bytes: usize,
    pub arena_bytes: usize,
    pub weight_bytes: usize,
    pub raw_weight_bytes: usize,
    pub params: usize,
    pub effective_params: usize,
    pub fits_storage: bool,
    pub fits_memory: bool,
    pub layers: Vec<LayerResource>,
}

impl ResourceReport {
    pub fn fits(&self) -> bool {
        self.fits_storage && self.fits_memory
    }
}

fn kept_elements(len: usize, cfg: Option<&crate::codec::SparseConfig>) -> usize {
    match cfg {
        Some(c) => {
            let b = c.block_size;
            let blocks = len / b;
            (blocks - c.pruned_blocks(blocks)) * b + len % b
        }
        None => len,
    }
}

/// Storage and peak memory of `graph` under `profile`, checked against
/// `budgets`.
///
/// Weight bytes are exact when the graph carries parameters (weights are
/// pruned and coded as the compiler would) and estimated from the
/// configuration otherwise.
pub fn resource_eval(graph: &ModelGraph, profile: &SparseProfile, budgets: &Budgets) -> Result<ResourceReport> {
    let g = infer_shapes(graph)?;
    let plan = plan_memory(&g)?;
    let mut storage = PACKAGE_HEADER_BYTES;
    let (mut weight_bytes, mut raw_weight_bytes, mut params, mut effective) = (0, 0, 0, 0);
    let mut layers = Vec::with_capacity(g.layers.len());
    for (i, l) in g.layers.iter().enumerate() {
        let in_shape = g.node_shape(l.inputs[0]).unwrap();
        let layout = weight_specs(l, in_shape)?;
        let cfg = profile.get(i).filter(|_| l.kind.is_prunable());
        let mut lr = LayerResource {
            kind: l.kind,
            dense_bytes: 0,
            stored_bytes: 0,
            raw_bytes: 0,
            effective_params: 0,
            sparse: false,
            ratio: 1.0,
        };
        let present = l.params.as_ref().map(|p| p.weight_tensors());
        for (k, spec) in layout.tensors.iter().enumerate() {
            let n = spec.numel();
            let c = if spec.prunable { cfg } else { None };
            lr.dense_bytes += n;
            match present.as_ref().and_then(|w| w.get(k)) {
                Some(w) => {
                    let compiled = compile_weights(w, c);
                    lr.stored_bytes += compiled.store.byte_len();
                    match &compiled.store {
                        StoredWeights::Sparse(e) => {
                            lr.sparse = true;
                            lr.raw_bytes += e.raw_bytes();
                        }
                        StoredWeights::Dense(v) => lr.raw_bytes += v.len(),
                    }
                    lr.effective_params += compiled.store.nonzero_count();
                }
                None => {
                    let s = estimate_stored_bytes(n, c);
                    lr.sparse |= s < n;
                    lr.stored_bytes += s;
                    lr.raw_bytes += s;
                    lr.effective_params += kept_elements(n, c);
                }
            }
        }
        if lr.stored_bytes > 0 {
            lr.ratio = lr.dense_bytes as f64 / lr.stored_bytes as f64;
        }
        storage += LAYER_METADATA_BYTES + lr.stored_bytes + layout.aux_bytes + QPARAM_BYTES * (layout.qparams + 1);
        weight_bytes += lr.stored_bytes;
        raw_weight_bytes += lr.raw_bytes;
        params += lr.dense_bytes;
        effective += lr.effective_params;
        layers.push(lr);
    }
    let peak = plan.arena_size + LUT_RESERVE_BYTES.max(SoftmaxLut::footprint_bytes());
    Ok(ResourceReport {
        storage_bytes: storage,
        peak_memory_bytes: peak,
        arena_bytes: plan.arena_size,
        weight_bytes,
        raw_weight_bytes,
        params,
        effective_params: effective,
        fits_storage: storage <= budgets.storage,
        fits_memory: peak <= budgets.memory,
        layers,
    })
}

/// [`resource_eval`] using the configurations stored on the layers.
pub fn resource_eval_graph(graph: &ModelGraph, budgets: &Budgets) -> Result<ResourceReport> {
    resource_eval(graph, &graph.profile(), budgets)
}
