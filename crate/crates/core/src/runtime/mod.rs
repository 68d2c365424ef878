//! Compilation, memory planning, resource accounting, the package format
//! and the arena executor.

mod compile;
mod exec;
mod package;
mod plan;
mod resource;

pub use compile::{compile, compile_weights};
pub use exec::{run_inference, run_reference, ExecutionStats, LayerStats};
pub use package::{emit_package, load_package, Package, PACKAGE_MAGIC, PACKAGE_VERSION};
pub use plan::{check_plan, plan_memory, scratch_bytes, BufferPlacement, End, MemoryPlan, PlanConflict};
pub use resource::{
    resource_eval, resource_eval_graph, Budgets, LayerResource, ResourceReport, LAYER_METADATA_BYTES, LUT_RESERVE_BYTES,
    PACKAGE_HEADER_BYTES,
};
