use crate::codec::SparseConfig;

/// Magnitude contribution of one weight to its block's L1 norm.
pub trait BlockMagnitude: Copy + PartialEq {
    fn magnitude(self) -> f64;
    fn zero() -> Self;
}

impl BlockMagnitude for i8 {
    fn magnitude(self) -> f64 {
        (self as i32).abs() as f64
    }
    fn zero() -> Self {
        0
    }
}

impl BlockMagnitude for f32 {
    fn magnitude(self) -> f64 {
        (self as f64).abs()
    }
    fn zero() -> Self {
        0.0
    }
}

impl BlockMagnitude for f64 {
    fn magnitude(self) -> f64 {
        self.abs()
    }
    fn zero() -> Self {
        0.0
    }
}

/// Which aligned blocks of one tensor survived pruning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    pub block_size: usize,
    /// One entry per whole block; `true` means kept. A ragged tail shorter
    /// than one block is never pruned and has no entry.
    pub kept: Vec<bool>,
}

impl PruneMask {
    pub fn kept_blocks(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    pub fn total_blocks(&self) -> usize {
        self.kept.len()
    }
}

/// Zeroes the `floor(rho * n_blocks)` aligned blocks with the smallest L1
/// norm. Equal norms are pruned lowest index first.
pub fn prune_blockwise<T: BlockMagnitude>(weights: &[T], cfg: &SparseConfig) -> (Vec<T>, PruneMask) {
    let b = cfg.block_size;
    let n_blocks = weights.len() / b;
    let n_prune = cfg.pruned_blocks(n_blocks);

    let norms: Vec<f64> = weights[..n_blocks * b]
        .chunks_exact(b)
        .map(|blk| blk.iter().map(|w| w.magnitude()).sum())
        .collect();
    let mut order: Vec<usize> = (0..n_blocks).collect();
    // Stable sort keeps index order among equal norms.
    order.sort_by(|&a, &c| norms[a].total_cmp(&norms[c]));

    let mut kept = vec![true; n_blocks];
    for &blk in &order[..n_prune] {
        kept[blk] = false;
    }
    let mut out = weights.to_vec();
    for (blk, _) in kept.iter().enumerate().filter(|(_, &k)| !k) {
        out[blk * b..(blk + 1) * b].iter_mut().for_each(|w| *w = T::zero());
    }
    (out, PruneMask { block_size: b, kept })
}
