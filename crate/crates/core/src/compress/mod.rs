//! Model compression: blockwise pruning, AGP scheduling and INT8 PTQ.

mod agp;
mod prune;
mod ptq;

pub use agp::{agp_target_sparsity, AgpSchedule};
pub use prune::{prune_blockwise, BlockMagnitude, PruneMask};
pub use ptq::{
    calibrate_ptq, dequantize_slice, quantize_bias, quantize_slice, requantize, FixedMultiplier, RangeStats,
    TensorRole,
};
