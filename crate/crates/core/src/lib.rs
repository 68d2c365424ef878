//! Integer-only sparse transformer toolkit for microcontroller-class targets.
//!
//! The crate covers the whole path from a quantized model description to an
//! executable deployment package:
//!
//! * [`ir`]: model graph, supernet/choice-block family, shape inference.
//! * [`codec`]: blockwise run-length coding and adaptive dense/sparse storage.
//! * [`compress`]: blockwise pruning, AGP scheduling, PTQ calibration and
//!   fixed-point requantization.
//! * [`kernels`]: INT8 operators (dense and sparse conv/linear, layer norm,
//!   LUT softmax, pooling, encoder).
//! * [`runtime`]: head/tail arena planner, resource evaluation, package
//!   format and the arena executor.
//! * [`nas`]: resource-gated search-space analysis, supernet search and
//!   single-path search over a pluggable accuracy evaluator.

pub mod codec;
pub mod compress;
pub mod error;
pub mod ir;
pub mod kernels;
pub mod nas;
pub mod params;
pub mod runtime;
pub mod tensor;

pub use codec::{EncodedWeights, SparseConfig, StoredWeights};
pub use error::{Error, Result};
pub use ir::{LayerKind, LayerSpec, ModelGraph, NodeRef, SparseProfile};
pub use runtime::{Budgets, ExecutionStats, MemoryPlan, Package, ResourceReport};
pub use tensor::{QuantParams, TensorI8};
