//! `sparsekit`: encode, run, search and benchmark INT8 sparse models.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sparsekit_core::ir::{load_model, random_weights, save_model, LayerAttrs, LayerKind, LayerSpec, NodeRef};
use sparsekit_core::kernels::{softmax_direct, softmax_lut};
use sparsekit_core::nas::{run_search, AccuracyEvaluator, CandidateRecord, CommandEvaluator, SearchSpace, SurrogateEvaluator};
use sparsekit_core::runtime::{emit_package, load_package, resource_eval_graph, run_inference, Package};
use sparsekit_core::{Budgets, Error, ModelGraph, QuantParams, SparseConfig, TensorI8};

#[derive(Parser)]
#[command(name = "sparsekit", version, about = "INT8 sparse model toolkit for microcontroller budgets")]
struct Cli {
    /// Seed for anything drawn at random.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Print per-layer detail.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct BudgetArgs {
    /// Storage budget in bytes.
    #[arg(long, default_value_t = 1_048_576)]
    budget_storage: usize,
    /// Memory budget in bytes.
    #[arg(long, default_value_t = 327_680)]
    budget_memory: usize,
}

impl BudgetArgs {
    fn budgets(self) -> Budgets {
        Budgets { storage: self.budget_storage, memory: self.budget_memory }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Prune, code and package a model file.
    Encode {
        model: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Apply this sparsity to every prunable layer, replacing the file's settings.
        #[arg(long)]
        sparsity: Option<f64>,
        /// Block size used with --sparsity (depthwise layers always use 3).
        #[arg(long, default_value_t = 4)]
        block_size: usize,
        /// Prune as configured but store every weight tensor densely.
        #[arg(long)]
        dense_storage: bool,
        #[command(flatten)]
        budgets: BudgetArgs,
        /// Write the package even if it exceeds a budget.
        #[arg(long)]
        override_budget: bool,
        /// Print the resource report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run a package on an input tensor file.
    Infer {
        package: PathBuf,
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Print execution statistics as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Analyse a search space, then search supernets and single paths.
    Search {
        config: PathBuf,
        /// Directory for the best model, its package and the search log.
        #[arg(short, long)]
        output: PathBuf,
        /// Continue even if the space is not accepted.
        #[arg(long)]
        force: bool,
        /// External scorer: called as `<cmd> <model.toml>`, prints a score.
        #[arg(long)]
        evaluator: Option<PathBuf>,
        /// Effective parameter count the built-in surrogate scores highest.
        #[arg(long, default_value_t = 500_000.0)]
        surrogate_optimum: f64,
        /// Override the budgets in the config file.
        #[arg(long)]
        budget_storage: Option<usize>,
        #[arg(long)]
        budget_memory: Option<usize>,
    },
    /// Time a package layer by layer.
    Bench {
        package: Option<PathBuf>,
        #[arg(long, default_value_t = 11)]
        reps: usize,
        /// A second package (typically the dense variant) to compare against.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Input tensor file; random input when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Also compare LUT and direct softmax on an N x N input.
        #[arg(long)]
        softmax: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Write a small conv plus encoder model with random weights, and a
    /// matching input tensor.
    Demo {
        #[arg(short, long)]
        output: PathBuf,
    },
}

/// Exit codes: 0 success, 1 budget or shape, 2 parse or invalid input,
/// 3 search failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::BudgetExceeded { .. } | Error::ShapeMismatch(_) => 1,
        Error::NoFeasibleSample
        | Error::NoFeasibleSupernet
        | Error::NoFeasibleModel
        | Error::SpaceRejected(_)
        | Error::Evaluator(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Encode { model, output, sparsity, block_size, dense_storage, budgets, override_budget, json } => {
            let opts = EncodeOpts { sparsity, block_size, dense_storage, override_budget, json, verbose: cli.verbose };
            encode(&model, &output, budgets.budgets(), opts)
        }
        Command::Infer { package, input, output, json } => infer(&package, &input, &output, json, cli.verbose),
        Command::Search { config, output, force, evaluator, surrogate_optimum, budget_storage, budget_memory } => {
            let mut space = SearchSpace::load(&config)?;
            if let Some(s) = budget_storage {
                space.budgets.storage = s;
            }
            if let Some(m) = budget_memory {
                space.budgets.memory = m;
            }
            if cli.seed != 0 {
                space.seed = cli.seed;
            }
            let mut ev: Box<dyn AccuracyEvaluator> = match evaluator {
                Some(p) => Box::new(CommandEvaluator::new(p, vec![])),
                None => Box::new(SurrogateEvaluator::new(surrogate_optimum)),
            };
            search(&space, ev.as_mut(), force, &output, cli.verbose)
        }
        Command::Bench { package, reps, compare, input, softmax, json } => {
            if package.is_none() && softmax.is_none() {
                return Err(Error::InvalidConfig("bench needs a package or --softmax".into()));
            }
            bench(package.as_deref(), compare.as_deref(), input.as_deref(), reps.max(1), softmax, cli.seed, json)
        }
        Command::Demo { output } => demo(&output, cli.seed),
    }
}

fn read_package(path: &Path) -> Result<Package, Error> {
    load_package(&std::fs::read(path)?)
}

fn read_tensor(path: &Path) -> Result<TensorI8, Error> {
    TensorI8::read_from(File::open(path)?)
}

fn write_tensor(t: &TensorI8, path: &Path) -> Result<(), Error> {
    let mut w = BufWriter::new(File::create(path)?);
    t.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

struct EncodeOpts {
    sparsity: Option<f64>,
    block_size: usize,
    dense_storage: bool,
    override_budget: bool,
    json: bool,
    verbose: bool,
}

fn encode(model: &Path, output: &Path, budgets: Budgets, opts: EncodeOpts) -> Result<(), Error> {
    let EncodeOpts { sparsity, block_size, dense_storage, override_budget, json, verbose } = opts;
    let mut g = load_model(model)?;
    if let Some(rho) = sparsity {
        for l in &mut g.layers {
            l.sparse_cfg = match l.kind {
                LayerKind::DWConv3x3 => Some(SparseConfig::new(rho, 3)?),
                k if k.is_prunable() => Some(SparseConfig::new(rho, block_size)?),
                _ => None,
            };
        }
    }
    let mut pkg = Package::build(&g)?;
    if dense_storage {
        for l in &mut pkg.graph.layers {
            l.sparse_cfg = None;
            if let Some(p) = l.params.as_mut() {
                for w in p.prunable_mut() {
                    *w = w.densified();
                }
            }
        }
    }
    let report = resource_eval_graph(&pkg.graph, &budgets)?;
    if json {
        println!("{}", to_json(&report));
    } else {
        println!("{:>3}  {:<16} {:>10} {:>10} {:>7}  format", "#", "kind", "dense B", "stored B", "ratio");
        for (i, l) in report.layers.iter().enumerate() {
            if l.dense_bytes == 0 && !verbose {
                continue;
            }
            let fmt = if l.sparse { "sparse" } else { "dense" };
            println!("{i:>3}  {:<16} {:>10} {:>10} {:>7.3}  {fmt}", l.kind.name(), l.dense_bytes, l.stored_bytes, l.ratio);
        }
        println!(
            "storage {} / {} B ({})",
            report.storage_bytes,
            budgets.storage,
            if report.fits_storage { "fits" } else { "EXCEEDS" }
        );
        println!(
            "memory  {} / {} B ({})",
            report.peak_memory_bytes,
            budgets.memory,
            if report.fits_memory { "fits" } else { "EXCEEDS" }
        );
        println!("params  {} effective of {}", report.effective_params, report.params);
    }
    let bytes = emit_package(&pkg.graph, &budgets, override_budget)?;
    std::fs::write(output, bytes)?;
    Ok(())
}

#[derive(Serialize)]
struct InferSummary {
    elapsed_us: u128,
    macs: u64,
    exp_evals: u64,
    arena_high_water: usize,
    arena_size: usize,
    argmax: Option<usize>,
}

fn infer(package: &Path, input: &Path, output: &Path, json: bool, verbose: bool) -> Result<(), Error> {
    let pkg = read_package(package)?;
    let x = read_tensor(input)?;
    let (y, stats) = run_inference(&pkg, &x)?;
    if stats.arena_high_water > stats.arena_size {
        return Err(Error::MalformedPackage("arena high-water mark exceeds the plan".into()));
    }
    write_tensor(&y, output)?;
    let summary = InferSummary {
        elapsed_us: stats.elapsed.as_micros(),
        macs: stats.macs,
        exp_evals: stats.exp_evals,
        arena_high_water: stats.arena_high_water,
        arena_size: stats.arena_size,
        argmax: y.argmax(),
    };
    if json {
        println!("{}", to_json(&summary));
        return Ok(());
    }
    if verbose {
        for (i, l) in stats.layers.iter().enumerate() {
            println!("{i:>3}  {:<16} {:>10} us {:>12} MACs {:>6} exp", l.kind.name(), l.elapsed.as_micros(), l.macs, l.exp_evals);
        }
    }
    println!("latency    {} us", summary.elapsed_us);
    println!("MACs       {}", summary.macs);
    println!("exp calls  {}", summary.exp_evals);
    println!("arena      {} / {} B high-water", summary.arena_high_water, summary.arena_size);
    if let Some(k) = summary.argmax {
        println!("argmax     {k}");
    }
    Ok(())
}

#[derive(Serialize)]
struct SparseSummary<'a> {
    sparsity: f64,
    layers: Vec<SparseLayer<'a>>,
}

#[derive(Serialize)]
struct SparseLayer<'a> {
    layer: usize,
    kind: &'a str,
    sparsity: f64,
    block_size: usize,
}

fn search(space: &SearchSpace, ev: &mut dyn AccuracyEvaluator, force: bool, out: &Path, verbose: bool) -> Result<(), Error> {
    std::fs::create_dir_all(out)?;
    let mut log = BufWriter::new(File::create(out.join("search_log.ndjson"))?);
    let mut io_err: Option<std::io::Error> = None;
    let mut sink = |r: &CandidateRecord| {
        if io_err.is_none() {
            if let Err(e) = serde_json::to_writer(&mut log, r).map_err(std::io::Error::from).and_then(|_| log.write_all(b"\n")) {
                io_err = Some(e);
            }
        }
        if verbose {
            eprintln!("{:?} #{} {:?} {:?}", r.stage, r.iteration, r.outcome, r.score);
        }
    };
    let result = run_search(space, ev, force, &mut sink);
    log.flush()?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let res = result?;
    let best = &res.best;
    save_model(&best.model, &out.join("best_model.toml"))?;
    std::fs::write(out.join("best_model.tfpk"), emit_package(&best.model, &space.budgets, false)?)?;
    let sparse = SparseSummary {
        sparsity: best.plan.sparsity,
        layers: best
            .model
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| {
                l.sparse_cfg.map(|c| SparseLayer { layer: i, kind: l.kind.name(), sparsity: c.sparsity, block_size: c.block_size })
            })
            .collect(),
    };
    std::fs::write(out.join("sparse_config.json"), to_json(&sparse))?;
    std::fs::write(out.join("supernet.json"), to_json(&res.supernet.supernet))?;
    println!("acceptance  {:.3} ({})", res.acceptance, if res.accepted { "accepted" } else { "forced" });
    println!("supernet    #{} mean score {:.4}", res.supernet.index, res.supernet.mean_score);
    println!("best score  {:.4} at sparsity {}", best.score, best.plan.sparsity);
    println!(
        "resources   storage {} B, memory {} B, {} effective params",
        best.report.storage_bytes, best.report.peak_memory_bytes, best.report.effective_params
    );
    Ok(())
}

struct Timing {
    per_layer: Vec<Duration>,
    total: Duration,
    macs: u64,
    output: TensorI8,
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort_unstable();
    v[v.len() / 2]
}

fn time_package(pkg: &Package, x: &TensorI8, reps: usize) -> Result<Timing, Error> {
    let mut layers: Vec<Vec<Duration>> = vec![Vec::with_capacity(reps); pkg.graph.layers.len()];
    let mut totals = Vec::with_capacity(reps);
    let mut first: Option<TensorI8> = None;
    let mut macs = 0;
    for _ in 0..reps {
        let (y, stats) = run_inference(pkg, x)?;
        match &first {
            Some(f) if *f != y => return Err(Error::MalformedPackage("repeated runs disagree".into())),
            Some(_) => {}
            None => first = Some(y),
        }
        for (acc, l) in layers.iter_mut().zip(&stats.layers) {
            acc.push(l.elapsed);
        }
        totals.push(stats.elapsed);
        macs = stats.macs;
    }
    Ok(Timing { per_layer: layers.into_iter().map(median).collect(), total: median(totals), macs, output: first.unwrap() })
}

#[derive(Serialize, Default)]
struct BenchSummary {
    #[serde(skip_serializing_if = "Option::is_none")]
    median_us: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    macs: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    compare_median_us: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    compare_macs: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    speedup: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    outputs_match: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    softmax_lut_exp: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    softmax_direct_exp: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    softmax_lut_us: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    softmax_direct_us: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    output_checksum: Option<u64>,
}

fn micros(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

fn checksum(t: &TensorI8) -> u64 {
    t.data().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u8 as u64).wrapping_mul(0x0100_0000_01b3))
}

#[allow(clippy::too_many_arguments)]
fn bench(
    package: Option<&Path>,
    compare: Option<&Path>,
    input: Option<&Path>,
    reps: usize,
    softmax: Option<usize>,
    seed: u64,
    json: bool,
) -> Result<(), Error> {
    let mut s = BenchSummary::default();
    if let Some(path) = package {
        let pkg = read_package(path)?;
        let x = match input {
            Some(p) => read_tensor(p)?,
            None => TensorI8::random(pkg.graph.input_shape.clone(), pkg.graph.input_q, seed),
        };
        let t = time_package(&pkg, &x, reps)?;
        if !json {
            println!("{:>3}  {:<16} {:>12}", "#", "kind", "median us");
            for (i, (l, d)) in pkg.graph.layers.iter().zip(&t.per_layer).enumerate() {
                println!("{i:>3}  {:<16} {:>12.1}", l.kind.name(), micros(*d));
            }
            println!("total median {:.1} us over {reps} reps, {} MACs", micros(t.total), t.macs);
        }
        s.median_us = Some(micros(t.total));
        s.macs = Some(t.macs);
        s.output_checksum = Some(checksum(&t.output));
        if let Some(other) = compare {
            let c = time_package(&read_package(other)?, &x, reps)?;
            let speedup = c.total.as_secs_f64() / t.total.as_secs_f64().max(1e-12);
            if !json {
                println!("compare median {:.1} us, {} MACs; speedup {speedup:.2}x", micros(c.total), c.macs);
            }
            s.compare_median_us = Some(micros(c.total));
            s.compare_macs = Some(c.macs);
            s.speedup = Some(speedup);
            s.outputs_match = Some(c.output == t.output);
        }
    }
    if let Some(n) = softmax {
        let x = TensorI8::random(vec![n, n], QuantParams { scale: 1.0 / 16.0, zero_point: 0 }, seed);
        let t0 = Instant::now();
        let (lut_out, lut_exp) = softmax_lut(&x)?;
        let lut_t = t0.elapsed();
        let t0 = Instant::now();
        let (direct_out, direct_exp) = softmax_direct(&x)?;
        let direct_t = t0.elapsed();
        if lut_out != direct_out {
            return Err(Error::ShapeMismatch("LUT and direct softmax disagree".into()));
        }
        if !json {
            println!(
                "softmax {n}x{n}: LUT {lut_exp} exp calls in {:.1} us, direct {direct_exp} exp calls in {:.1} us",
                micros(lut_t),
                micros(direct_t)
            );
        }
        s.softmax_lut_exp = Some(lut_exp);
        s.softmax_direct_exp = Some(direct_exp);
        s.softmax_lut_us = Some(micros(lut_t));
        s.softmax_direct_us = Some(micros(direct_t));
    }
    if json {
        println!("{}", to_json(&s));
    }
    Ok(())
}

/// 16x16x3 input, strided conv, pointwise widening, one encoder over the
/// 64 tokens, sequence pooling and a linear classifier.
fn demo_graph(seed: u64) -> Result<ModelGraph, Error> {
    let mut g = ModelGraph::new(vec![16, 16, 3], QuantParams { scale: 1.0 / 64.0, zero_point: 0 });
    let conv = |c, stride, relu| LayerAttrs { out_channels: Some(c), stride, relu, ..Default::default() };
    let x = g.push(LayerSpec::chain(LayerKind::Conv3x3, conv(32, 2, true), NodeRef::Input));
    let x = g.push(LayerSpec::chain(LayerKind::Conv1x1, conv(64, 1, false), x));
    let enc = LayerAttrs { heads: Some(2), hidden: Some(128), ..Default::default() };
    let x = g.push(LayerSpec::chain(LayerKind::Encoder, enc, x));
    let x = g.push(LayerSpec::chain(LayerKind::SeqPool, LayerAttrs::default(), x));
    let head = LayerAttrs { out_features: Some(10), flatten: true, ..Default::default() };
    g.push(LayerSpec::chain(LayerKind::Linear, head, x));
    random_weights(&g, seed)
}

fn demo(out: &Path, seed: u64) -> Result<(), Error> {
    std::fs::create_dir_all(out)?;
    let g = demo_graph(seed)?;
    save_model(&g, &out.join("model.toml"))?;
    let x = TensorI8::random(g.input_shape.clone(), g.input_q, seed ^ 0x5eed);
    write_tensor(&x, &out.join("input.tensor"))?;
    println!("wrote {} and {}", out.join("model.toml").display(), out.join("input.tensor").display());
    Ok(())
}
