use crate::codec::{choose_storage_format_lossless, SparseConfig, StoredWeights};
use crate::compress::prune_blockwise;
use crate::error::{Error, Result};
use crate::ir::ModelGraph;
use crate::params::QWeights;

/// Prunes `w` to `cfg` and stores it in the smaller of dense and sparse form.
///
/// Quantized survivors can be zero, so encoding is lossless rather than
/// requiring fully nonzero blocks.
pub fn compile_weights(w: &QWeights, cfg: Option<&SparseConfig>) -> QWeights {
    let dense = w.dense_values();
    let store = match cfg {
        Some(c) => {
            let (pruned, _) = prune_blockwise(&dense, c);
            choose_storage_format_lossless(&pruned, c.block_size)
        }
        None => StoredWeights::Dense(dense),
    };
    QWeights { store, ..w.clone() }
}

/// Applies every layer's sparse configuration to its prunable weights.
///
/// Layers without a configuration keep dense storage. Fails if a configured
/// layer has no parameters to prune.
pub fn compile(graph: &ModelGraph) -> Result<ModelGraph> {
    let mut g = graph.clone();
    for (i, layer) in g.layers.iter_mut().enumerate() {
        let cfg = layer.sparse_cfg;
        if let Some(c) = &cfg {
            c.check()?;
        }
        match layer.params.as_mut() {
            Some(p) => {
                for w in p.prunable_mut() {
                    *w = compile_weights(w, cfg.as_ref());
                }
            }
            None if layer.kind.is_prunable() => {
                return Err(Error::InvalidGraph(format!("layer {i} ({}) has no parameters", layer.kind)));
            }
            None => {}
        }
    }
    Ok(g)
}
