use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::evaluator::AccuracyEvaluator;
use super::space::{SearchSpace, SparsePlan};
use crate::codec::SparseConfig;
use crate::compress::prune_blockwise;
use crate::error::{Error, Result};
use crate::ir::{build_path, random_weights, sample_path, ModelGraph, PathChoice, SupernetSpec};
use crate::params::QWeights;
use crate::runtime::{compile, plan_memory, resource_eval, resource_eval_graph, Budgets, ResourceReport, LUT_RESERVE_BYTES};

/// Paths drawn by [`test_supernet`].
pub const SUPERNET_TEST_SAMPLES: usize = 100;

/// Epochs of training the search asks for before pruning a candidate.
pub const WARMUP_EPOCHS: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Analyze,
    SupernetTest,
    Supernet,
    SinglePath,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Fits the budgets and lies in the parameter window.
    Accepted,
    /// Fits the budgets but lies outside the parameter window.
    OutOfBounds,
    /// Exceeds a budget.
    Infeasible,
    /// Pruned and scored.
    Evaluated,
    /// Supernet passed its memory test.
    Passed,
    /// Supernet skipped.
    Skipped,
}

/// One line of the search log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateRecord {
    pub stage: Stage,
    pub iteration: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub supernet: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub path: Vec<PathChoice>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sparse: Option<SparsePlan>,
    pub outcome: Outcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<ResourceReport>,
}

impl CandidateRecord {
    fn new(stage: Stage, iteration: usize, outcome: Outcome) -> Self {
        Self { stage, iteration, supernet: None, path: vec![], sparse: None, outcome, score: None, report: None }
    }
}

/// Receives every [`CandidateRecord`] as it is produced.
pub type SearchLog<'a> = &'a mut dyn FnMut(&CandidateRecord);

/// Fraction of budget-feasible sampled models whose effective parameter
/// count lies in `[lambda_lo * L_m, lambda_up * L_m]`.
///
/// Fails with [`Error::NoFeasibleSample`] when no sample fits.
pub fn analyze_search_space(space: &SearchSpace, iterations: usize, seed: u64, log: SearchLog<'_>) -> Result<f64> {
    if iterations == 0 {
        return Err(Error::InvalidConfig("analysis needs at least one iteration".into()));
    }
    let net = space.full_supernet();
    let (lo, hi) = space.param_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut n_eval, mut n_accept) = (0usize, 0usize);
    for i in 0..iterations {
        let path = sample_path(&net, &mut rng);
        let g = build_path(&net, &path)?;
        let plan = space.sample_sparse(&g, &mut rng)?;
        let r = resource_eval(&g, &plan.profile, &space.budgets)?;
        let outcome = if !r.fits() {
            Outcome::Infeasible
        } else {
            n_eval += 1;
            let p = r.effective_params as f64;
            if lo <= p && p <= hi {
                n_accept += 1;
                Outcome::Accepted
            } else {
                Outcome::OutOfBounds
            }
        };
        log(&CandidateRecord { path, sparse: Some(plan), report: Some(r), ..CandidateRecord::new(Stage::Analyze, i, outcome) });
    }
    if n_eval == 0 {
        return Err(Error::NoFeasibleSample);
    }
    Ok(n_accept as f64 / n_eval as f64)
}

/// A space is accepted when strictly more than 90% of feasible samples
/// fall in the parameter window.
pub fn accept_search_space(probability: f64) -> bool {
    probability > 0.9
}

/// Peak memory of a graph: planned arena plus the softmax table reserve.
fn peak_memory(g: &ModelGraph) -> Result<usize> {
    Ok(plan_memory(g)?.arena_size + LUT_RESERVE_BYTES)
}

/// How many of `samples` random paths exceed the memory budget.
pub fn supernet_memory_exceedances(supernet: &SupernetSpec, budgets: &Budgets, samples: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut over = 0;
    for _ in 0..samples {
        let g = build_path(supernet, &sample_path(supernet, &mut rng))?;
        if peak_memory(&g)? > budgets.memory {
            over += 1;
        }
    }
    Ok(over)
}

/// Samples 100 paths; fails the supernet only when more than half of them
/// exceed the memory budget.
pub fn test_supernet(supernet: &SupernetSpec, budgets: &Budgets, seed: u64) -> Result<bool> {
    Ok(supernet_memory_exceedances(supernet, budgets, SUPERNET_TEST_SAMPLES, seed)? * 2 <= SUPERNET_TEST_SAMPLES)
}

/// Random weights pruned to `plan` in one step and stored adaptively.
pub fn one_shot_prune(graph: &ModelGraph, plan: &SparsePlan, seed: u64) -> Result<ModelGraph> {
    compile(&random_weights(&graph.with_profile(&plan.profile), seed)?)
}

fn prune_to(w: &mut QWeights, sparsity: f64, block_size: usize) -> Result<()> {
    let cfg = SparseConfig::new(sparsity, block_size)?;
    let (pruned, _) = prune_blockwise(&w.dense_values(), &cfg);
    *w = QWeights::new(w.shape.clone(), pruned, w.qparams, w.bias.clone())?;
    Ok(())
}

/// Random weights pruned along the AGP ramp from 0 to `plan.sparsity`,
/// hinting `agp.interval` training epochs between steps, then compiled.
pub fn iterative_prune(
    graph: &ModelGraph,
    plan: &SparsePlan,
    space: &SearchSpace,
    seed: u64,
    evaluator: &mut dyn AccuracyEvaluator,
) -> Result<ModelGraph> {
    let mut g = random_weights(&graph.with_profile(&plan.profile), seed)?;
    let sched = space.agp.schedule(plan.sparsity)?;
    let steps: Vec<(u64, f64)> = sched.steps().collect();
    for (k, &(_, s)) in steps.iter().enumerate() {
        for (l, b) in g.layers.iter_mut().zip(&plan.block_sizes) {
            if let (Some(b), Some(p)) = (b, l.params.as_mut()) {
                for w in p.prunable_mut() {
                    prune_to(w, s, *b)?;
                }
            }
        }
        if k + 1 < steps.len() {
            evaluator.train_hint(sched.interval);
        }
    }
    compile(&g)
}

fn checked_score(s: f64) -> Result<f64> {
    if s.is_finite() {
        Ok(s)
    } else {
        Err(Error::Evaluator(format!("evaluator returned {s}")))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupernetOutcome {
    pub supernet: SupernetSpec,
    /// Which sampled supernet won.
    pub index: usize,
    pub mean_score: f64,
}

/// Samples supernets, screens them with [`test_supernet`], and scores each
/// by the mean over paths of the mean score of its feasible one-shot-pruned
/// sparse variants. Returns the best; ties keep the earlier supernet.
#[allow(clippy::too_many_arguments)]
pub fn search_supernet(
    space: &SearchSpace,
    supernets: usize,
    paths: usize,
    configs: usize,
    evaluator: &mut dyn AccuracyEvaluator,
    seed: u64,
    log: SearchLog<'_>,
) -> Result<SupernetOutcome> {
    if supernets == 0 || paths == 0 || configs == 0 {
        return Err(Error::InvalidConfig("supernet search needs iteration counts of at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<SupernetOutcome> = None;
    for i in 0..supernets {
        let net = space.sample_supernet(&mut rng);
        let test_seed: u64 = rng.gen();
        let passed = test_supernet(&net, &space.budgets, test_seed)?;
        log(&CandidateRecord {
            supernet: Some(i),
            ..CandidateRecord::new(Stage::SupernetTest, i, if passed { Outcome::Passed } else { Outcome::Skipped })
        });
        if !passed {
            continue;
        }
        evaluator.train_hint(WARMUP_EPOCHS);
        let mut path_means = Vec::with_capacity(paths);
        for j in 0..paths {
            let path = sample_path(&net, &mut rng);
            let g = build_path(&net, &path)?;
            let mut scores = Vec::with_capacity(configs);
            for k in 0..configs {
                let plan = space.sample_sparse(&g, &mut rng)?;
                let weight_seed: u64 = rng.gen();
                let r = resource_eval(&g, &plan.profile, &space.budgets)?;
                let mut rec = CandidateRecord {
                    supernet: Some(i),
                    path: path.clone(),
                    ..CandidateRecord::new(Stage::Supernet, j * configs + k, Outcome::Infeasible)
                };
                if r.fits() {
                    let pruned = one_shot_prune(&g, &plan, weight_seed)?;
                    let s = checked_score(evaluator.evaluate(&pruned, &plan)?)?;
                    scores.push(s);
                    rec.outcome = Outcome::Evaluated;
                    rec.score = Some(s);
                }
                rec.sparse = Some(plan);
                rec.report = Some(r);
                log(&rec);
            }
            if !scores.is_empty() {
                path_means.push(mean(&scores));
            }
        }
        if path_means.is_empty() {
            log(&CandidateRecord { supernet: Some(i), ..CandidateRecord::new(Stage::Supernet, i, Outcome::Skipped) });
            continue;
        }
        let m = mean(&path_means);
        if best.as_ref().is_none_or(|b| m > b.mean_score) {
            best = Some(SupernetOutcome { supernet: net, index: i, mean_score: m });
        }
    }
    best.ok_or(Error::NoFeasibleSupernet)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinglePathOutcome {
    /// Pruned, compiled model with its sparse configuration installed.
    pub model: ModelGraph,
    pub plan: SparsePlan,
    pub path: Vec<PathChoice>,
    pub score: f64,
    /// Exact resource report of `model`.
    pub report: ResourceReport,
}

/// Samples path and sparse-configuration pairs, prunes feasible ones along
/// the AGP ramp, scores them and keeps the best. Ties keep the earlier pair.
/// A candidate counts as feasible only if both the configuration estimate
/// and the compiled model fit the budgets.
pub fn search_single_path(
    supernet: &SupernetSpec,
    space: &SearchSpace,
    iterations: usize,
    evaluator: &mut dyn AccuracyEvaluator,
    seed: u64,
    log: SearchLog<'_>,
) -> Result<SinglePathOutcome> {
    if iterations == 0 {
        return Err(Error::InvalidConfig("single-path search needs at least one iteration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<SinglePathOutcome> = None;
    for i in 0..iterations {
        let path = sample_path(supernet, &mut rng);
        let g = build_path(supernet, &path)?;
        let plan = space.sample_sparse(&g, &mut rng)?;
        let weight_seed: u64 = rng.gen();
        let estimate = resource_eval(&g, &plan.profile, &space.budgets)?;
        let mut rec = CandidateRecord { path: path.clone(), ..CandidateRecord::new(Stage::SinglePath, i, Outcome::Infeasible) };
        if !estimate.fits() {
            rec.sparse = Some(plan);
            rec.report = Some(estimate);
            log(&rec);
            continue;
        }
        evaluator.train_hint(WARMUP_EPOCHS);
        let model = iterative_prune(&g, &plan, space, weight_seed, evaluator)?;
        let report = resource_eval_graph(&model, &space.budgets)?;
        if report.fits() {
            let s = checked_score(evaluator.evaluate(&model, &plan)?)?;
            rec.outcome = Outcome::Evaluated;
            rec.score = Some(s);
            if best.as_ref().is_none_or(|b| s > b.score) {
                best = Some(SinglePathOutcome { model, plan: plan.clone(), path, score: s, report: report.clone() });
            }
        }
        rec.sparse = Some(plan);
        rec.report = Some(report);
        log(&rec);
    }
    best.ok_or(Error::NoFeasibleModel)
}

/// Result of the full pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub acceptance: f64,
    pub accepted: bool,
    pub supernet: SupernetOutcome,
    pub best: SinglePathOutcome,
}

/// Analysis, then supernet search, then single-path search, using the
/// space's iteration counts and seed. A rejected space stops the run with
/// [`Error::SpaceRejected`] unless `force` is set.
pub fn run_search(
    space: &SearchSpace,
    evaluator: &mut dyn AccuracyEvaluator,
    force: bool,
    log: SearchLog<'_>,
) -> Result<SearchOutcome> {
    space.check()?;
    let it = space.iterations;
    let mut seeds = ChaCha8Rng::seed_from_u64(space.seed);
    let (s1, s2, s3): (u64, u64, u64) = (seeds.gen(), seeds.gen(), seeds.gen());
    let acceptance = analyze_search_space(space, it.analyze, s1, log)?;
    let accepted = accept_search_space(acceptance);
    if !accepted && !force {
        return Err(Error::SpaceRejected(acceptance));
    }
    let supernet = search_supernet(space, it.supernets, it.paths, it.configs, evaluator, s2, log)?;
    let best = search_single_path(&supernet.supernet, space, it.single_path, evaluator, s3, log)?;
    Ok(SearchOutcome { acceptance, accepted, supernet, best })
}
