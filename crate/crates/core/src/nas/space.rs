use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::SparseConfig;
use crate::compress::AgpSchedule;
use crate::error::{Error, Result};
use crate::ir::{BlockType, Candidate, ChoiceBlock, LayerKind, ModelGraph, SparseProfile, SupernetSpec};
use crate::runtime::Budgets;
use crate::tensor::QuantParams;

/// A choice-block slot with the full range of hyper-parameters a sampled
/// supernet may draw from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockTemplate {
    pub block_type: BlockType,
    pub candidates: Vec<Candidate>,
    /// Output widths; ignored by pooling blocks.
    #[serde(default)]
    pub channels: Vec<usize>,
    #[serde(default)]
    pub repeats: Vec<usize>,
}

/// Iteration counts for the three search stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Iterations {
    /// Samples drawn when analysing the space.
    pub analyze: usize,
    /// Supernets sampled.
    pub supernets: usize,
    /// Paths per supernet.
    pub paths: usize,
    /// Sparse configurations per path.
    pub configs: usize,
    /// Single-path iterations.
    pub single_path: usize,
}

impl Default for Iterations {
    fn default() -> Self {
        Self { analyze: 200, supernets: 4, paths: 3, configs: 3, single_path: 10 }
    }
}

/// Gradual pruning settings for single-path search. The ramp always starts
/// at zero sparsity and ends at the sampled target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgpSettings {
    pub steps: u64,
    /// Training epochs between pruning steps, passed to the evaluator.
    pub interval: u64,
}

impl Default for AgpSettings {
    fn default() -> Self {
        Self { steps: 4, interval: 1 }
    }
}

impl AgpSettings {
    pub fn schedule(&self, target: f64) -> Result<AgpSchedule> {
        AgpSchedule::new(0.0, target, 0, self.steps, self.interval)
    }
}

fn default_input_q() -> QuantParams {
    QuantParams { scale: 1.0 / 128.0, zero_point: 0 }
}

fn default_block_sizes() -> Vec<usize> {
    vec![2, 4]
}

fn default_choices() -> usize {
    2
}

/// Everything the search loops sample from, plus the budgets and bounds
/// they check against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub input_shape: Vec<usize>,
    #[serde(default = "default_input_q")]
    pub input_quant: QuantParams,
    pub num_classes: usize,
    pub blocks: Vec<BlockTemplate>,
    /// Model-level sparsity targets; one is drawn per sparse configuration.
    pub sparsity_options: Vec<f64>,
    /// Per-layer block sizes; depthwise layers always use 3.
    #[serde(default = "default_block_sizes")]
    pub block_size_options: Vec<usize>,
    /// Width options kept per block when a supernet is sampled.
    #[serde(default = "default_choices")]
    pub supernet_width_choices: usize,
    #[serde(default)]
    pub budgets: Budgets,
    pub lambda_lo: f64,
    pub lambda_up: f64,
    #[serde(default)]
    pub iterations: Iterations,
    #[serde(default)]
    pub agp: AgpSettings,
    #[serde(default)]
    pub seed: u64,
}

/// A sparse configuration for a whole model: the sampled target sparsity
/// and the resulting per-layer settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsePlan {
    pub sparsity: f64,
    pub block_sizes: Vec<Option<usize>>,
    #[serde(skip)]
    pub profile: SparseProfile,
}

impl SparsePlan {
    /// Assigns `sparsity` to every prunable layer of `graph` with the given
    /// block size (3 on depthwise layers).
    pub fn uniform(graph: &ModelGraph, sparsity: f64, block_size: usize) -> Result<Self> {
        let sizes: Vec<Option<usize>> = graph
            .layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::DWConv3x3 => Some(3),
                k if k.is_prunable() => Some(block_size),
                _ => None,
            })
            .collect();
        Self::from_sizes(sparsity, sizes)
    }

    fn from_sizes(sparsity: f64, block_sizes: Vec<Option<usize>>) -> Result<Self> {
        let profile = block_sizes
            .iter()
            .map(|b| b.map(|b| SparseConfig::new(sparsity, b)).transpose())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { sparsity, block_sizes, profile: SparseProfile(profile) })
    }
}

impl SearchSpace {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        s.check()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lambda_lo < self.lambda_up) {
            return bad(format!("lambda_lo ({}) must be below lambda_up ({})", self.lambda_lo, self.lambda_up));
        }
        if self.sparsity_options.is_empty() || self.sparsity_options.iter().any(|s| !(0.0..1.0).contains(s)) {
            return bad("sparsity options must be non-empty and lie in [0, 1)".into());
        }
        if self.block_size_options.is_empty() || self.block_size_options.iter().any(|b| !matches!(b, 2 | 4)) {
            return bad("block size options must be drawn from {2, 4}".into());
        }
        if self.supernet_width_choices == 0 {
            return bad("supernet_width_choices must be at least 1".into());
        }
        if self.blocks.is_empty() {
            return bad("the space has no blocks".into());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.candidates.is_empty() {
                return bad(format!("block {i} has no candidates"));
            }
            if b.block_type != BlockType::Pooling && b.channels.is_empty() {
                return bad(format!("block {i} has no channel options"));
            }
        }
        if !self.input_quant.is_valid() {
            return bad("input quantization scale must be positive".into());
        }
        let it = self.iterations;
        if [it.analyze, it.supernets, it.paths, it.configs, it.single_path].contains(&0) {
            return bad("iteration counts must be at least 1".into());
        }
        Ok(())
    }

    fn supernet_with(&self, pick: impl FnMut(&BlockTemplate) -> Vec<usize>) -> SupernetSpec {
        let mut pick = pick;
        SupernetSpec {
            input_shape: self.input_shape.clone(),
            input_q: self.input_quant,
            num_classes: self.num_classes,
            blocks: self
                .blocks
                .iter()
                .map(|t| ChoiceBlock {
                    block_type: t.block_type,
                    candidates: t.candidates.clone(),
                    channel_options: if t.block_type == BlockType::Pooling { vec![] } else { pick(t) },
                    repeat_options: t.repeats.clone(),
                })
                .collect(),
        }
    }

    /// The supernet holding every width option; sampling a path from it
    /// samples the whole space.
    pub fn full_supernet(&self) -> SupernetSpec {
        self.supernet_with(|t| t.channels.clone())
    }

    /// Draws a supernet: each block keeps `supernet_width_choices` widths
    /// chosen at random from its range, in ascending order.
    pub fn sample_supernet<R: Rng + ?Sized>(&self, rng: &mut R) -> SupernetSpec {
        let k = self.supernet_width_choices;
        self.supernet_with(|t| {
            let mut w: Vec<usize> = t.channels.choose_multiple(rng, k.min(t.channels.len())).copied().collect();
            w.sort_unstable();
            w
        })
    }

    /// Draws a model-level sparsity and a block size per prunable layer.
    pub fn sample_sparse<R: Rng + ?Sized>(&self, graph: &ModelGraph, rng: &mut R) -> Result<SparsePlan> {
        let sparsity = *self.sparsity_options.choose(rng).unwrap();
        let sizes = graph
            .layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::DWConv3x3 => Some(3),
                k if k.is_prunable() => Some(*self.block_size_options.choose(rng).unwrap()),
                _ => None,
            })
            .collect();
        SparsePlan::from_sizes(sparsity, sizes)
    }

    /// Effective-parameter window `[lambda_lo * L_m, lambda_up * L_m]`.
    pub fn param_bounds(&self) -> (f64, f64) {
        let m = self.budgets.memory as f64;
        (self.lambda_lo * m, self.lambda_up * m)
    }

    /// Two Downsample/MobileNetV2/Transformer stacks and a pooling block,
    /// with the candidate lists of [`ChoiceBlock`]'s constructors.
    pub fn two_dot(
        input_shape: Vec<usize>,
        num_classes: usize,
        stage1: [Vec<usize>; 3],
        stage2: [Vec<usize>; 3],
        repeats: Vec<usize>,
    ) -> Self {
        let net = SupernetSpec::two_dot(input_shape.clone(), num_classes, stage1, stage2, repeats);
        Self::from_supernet(&net)
    }

    /// A space whose template is `net` itself.
    pub fn from_supernet(net: &SupernetSpec) -> Self {
        Self {
            input_shape: net.input_shape.clone(),
            input_quant: net.input_q,
            num_classes: net.num_classes,
            blocks: net
                .blocks
                .iter()
                .map(|b| BlockTemplate {
                    block_type: b.block_type,
                    candidates: b.candidates.clone(),
                    channels: b.channel_options.clone(),
                    repeats: b.repeat_options.clone(),
                })
                .collect(),
            sparsity_options: vec![0.5, 0.75, 0.9],
            block_size_options: default_block_sizes(),
            supernet_width_choices: default_choices(),
            budgets: Budgets::default(),
            lambda_lo: 0.8,
            lambda_up: 2.8,
            iterations: Iterations::default(),
            agp: AgpSettings::default(),
            seed: 0,
        }
    }
}
