//! Resource-gated architecture search.
//!
//! Three stages share one [`SearchSpace`]: an analysis that estimates how
//! often sampled sparse models land in a target parameter window, a
//! supernet search scored by one-shot-pruned samples, and a single-path
//! search that prunes gradually and keeps the best-scoring model. Accuracy
//! comes from an [`AccuracyEvaluator`].

mod evaluator;
mod search;
mod space;

pub use evaluator::{AccuracyEvaluator, CommandEvaluator, SurrogateEvaluator};
pub use search::{
    accept_search_space, analyze_search_space, iterative_prune, one_shot_prune, run_search, search_single_path,
    search_supernet, supernet_memory_exceedances, test_supernet, CandidateRecord, Outcome, SearchLog, SearchOutcome,
    SinglePathOutcome, Stage, SupernetOutcome, SUPERNET_TEST_SAMPLES, WARMUP_EPOCHS,
};
pub use space::{AgpSettings, BlockTemplate, Iterations, SearchSpace, SparsePlan};
