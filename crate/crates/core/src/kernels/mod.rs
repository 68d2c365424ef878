//! Integer-only operators.
//!
//! Every operator has a slice-level `*_into` form used by the arena executor
//! and, for the main ones, a [`TensorI8`](crate::tensor::TensorI8) wrapper.
//! Accumulation is in 32-bit integers with the input zero point subtracted
//! before each multiply; results are requantized with a
//! [`FixedMultiplier`](crate::compress::FixedMultiplier).

mod conv;
mod eltwise;
mod encoder;
mod linear;
mod mac;
mod norm;
mod pool;
mod softmax;

pub use conv::{conv2d_int8, conv2d_into, conv_maxpool_int8, dwconv2d_int8, dwconv2d_into, ConvKind};
pub use eltwise::{relu_into, residual_add, residual_add_into};
pub use encoder::{encoder_forward, encoder_into, encoder_scratch_bytes};
pub use linear::{linear_int8, linear_into, linear_out_shape};
pub use mac::{pack_i16x2, paired_mac, smlad};
pub use norm::{layernorm_into, scaled_layernorm, unscaled_layernorm, LN_EPSILON, NORM_SCALE_BITS};
pub use pool::{avgpool2x2_into, maxpool2x2_into, pooling, seqpool_into, seqpool_scratch_bytes, PoolKind};
pub use softmax::{
    exp_q31, softmax_direct, softmax_lut, softmax_rows_into, SoftmaxLut, SOFTMAX_OUT_Q, SOFTMAX_TABLE_LEN,
};

/// Work counters accumulated by kernels.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct OpCounters {
    /// Multiply-accumulate operations on in-bounds operands.
    pub macs: u64,
    /// Calls to the exponential function.
    pub exp_evals: u64,
}

impl OpCounters {
    pub fn add(&mut self, other: OpCounters) {
        self.macs += other.macs;
        self.exp_evals += other.exp_evals;
    }
}
