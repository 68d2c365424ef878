//! Choice-block supernets and single-path extraction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{infer_shapes, BlockTag, LayerAttrs, LayerKind, LayerSpec, ModelGraph, NodeRef};
use crate::error::{Error, Result};
use crate::tensor::QuantParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockType {
    Downsample,
    MobileNetV2,
    Transformer,
    Pooling,
}

/// One architecture option inside a choice block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Candidate {
    /// Stride-2 3x3 convolution.
    Conv3x3Down,
    /// 3x3 convolution fused with 2x2 max pooling.
    ConvMaxPoolDown,
    /// 1x1 expand, 3x3 depthwise, 1x1 project; residual when shapes match.
    InvertedResidual { expansion: usize },
    /// Encoders between channel-mixing convolutions:
    /// 3x3 conv, 1x1 conv to width D, encoders, 1x1 conv back, 3x3 conv.
    Transformer { heads: usize, mlp_ratio: usize },
    SeqPool,
    AvgPool,
}

impl Candidate {
    pub fn block_type(&self) -> BlockType {
        match self {
            Candidate::Conv3x3Down | Candidate::ConvMaxPoolDown => BlockType::Downsample,
            Candidate::InvertedResidual { .. } => BlockType::MobileNetV2,
            Candidate::Transformer { .. } => BlockType::Transformer,
            Candidate::SeqPool | Candidate::AvgPool => BlockType::Pooling,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceBlock {
    pub block_type: BlockType,
    pub candidates: Vec<Candidate>,
    /// Output channels (encoder width for transformer blocks). Unused by
    /// pooling blocks, where it may be empty.
    #[serde(default)]
    pub channel_options: Vec<usize>,
    /// Repeat counts; empty means a single instance.
    #[serde(default)]
    pub repeat_options: Vec<usize>,
}

impl ChoiceBlock {
    pub fn downsample(channels: Vec<usize>) -> Self {
        Self {
            block_type: BlockType::Downsample,
            candidates: vec![Candidate::Conv3x3Down, Candidate::ConvMaxPoolDown],
            channel_options: channels,
            repeat_options: vec![1],
        }
    }

    pub fn mobilenet(channels: Vec<usize>, repeats: Vec<usize>) -> Self {
        Self {
            block_type: BlockType::MobileNetV2,
            candidates: vec![Candidate::InvertedResidual { expansion: 2 }, Candidate::InvertedResidual { expansion: 4 }],
            channel_options: channels,
            repeat_options: repeats,
        }
    }

    pub fn transformer(widths: Vec<usize>, repeats: Vec<usize>) -> Self {
        Self {
            block_type: BlockType::Transformer,
            candidates: vec![
                Candidate::Transformer { heads: 2, mlp_ratio: 2 },
                Candidate::Transformer { heads: 4, mlp_ratio: 2 },
            ],
            channel_options: widths,
            repeat_options: repeats,
        }
    }

    pub fn pooling() -> Self {
        Self {
            block_type: BlockType::Pooling,
            candidates: vec![Candidate::SeqPool, Candidate::AvgPool],
            channel_options: vec![],
            repeat_options: vec![1],
        }
    }

    fn channels(&self) -> &[usize] {
        if self.channel_options.is_empty() {
            &[0]
        } else {
            &self.channel_options
        }
    }

    fn repeats(&self) -> &[usize] {
        if self.repeat_options.is_empty() {
            &[1]
        } else {
            &self.repeat_options
        }
    }

    /// Distinct (candidate, channels, repeats) selections.
    pub fn choice_count(&self) -> usize {
        self.candidates.len() * self.channels().len() * self.repeats().len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupernetSpec {
    pub input_shape: Vec<usize>,
    pub input_q: QuantParams,
    pub num_classes: usize,
    pub blocks: Vec<ChoiceBlock>,
}

/// The selection made in one choice block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathChoice {
    pub candidate: usize,
    pub channels: usize,
    pub repeats: usize,
}

impl SupernetSpec {
    /// Two Downsample/MobileNetV2/Transformer stacks followed by pooling.
    pub fn two_dot(input_shape: Vec<usize>, num_classes: usize, stage1: [Vec<usize>; 3], stage2: [Vec<usize>; 3], repeats: Vec<usize>) -> Self {
        let [d1, m1, t1] = stage1;
        let [d2, m2, t2] = stage2;
        Self {
            input_shape,
            input_q: QuantParams { scale: 1.0 / 128.0, zero_point: 0 },
            num_classes,
            blocks: vec![
                ChoiceBlock::downsample(d1),
                ChoiceBlock::mobilenet(m1, repeats.clone()),
                ChoiceBlock::transformer(t1, repeats.clone()),
                ChoiceBlock::downsample(d2),
                ChoiceBlock::mobilenet(m2, repeats.clone()),
                ChoiceBlock::transformer(t2, repeats),
                ChoiceBlock::pooling(),
            ],
        }
    }

    /// A small 32x32x3, ten-class instance.
    pub fn default_dot() -> Self {
        Self::two_dot(
            vec![32, 32, 3],
            10,
            [vec![16, 24], vec![16, 24], vec![32, 48]],
            [vec![32, 48], vec![32, 48], vec![64, 96]],
            vec![1, 2],
        )
    }

    /// Number of Downsample -> MobileNetV2 -> Transformer runs.
    pub fn dot_count(&self) -> usize {
        self.blocks
            .windows(3)
            .filter(|w| {
                w[0].block_type == BlockType::Downsample
                    && w[1].block_type == BlockType::MobileNetV2
                    && w[2].block_type == BlockType::Transformer
            })
            .count()
    }

    pub fn path_count(&self) -> usize {
        self.blocks.iter().map(ChoiceBlock::choice_count).product()
    }

    /// Structural problems, as readable messages.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            if !(2..=3).contains(&b.candidates.len()) {
                v.push(format!("choice block {i} has {} candidates, expected 2 or 3", b.candidates.len()));
            }
            if let Some(c) = b.candidates.iter().find(|c| c.block_type() != b.block_type) {
                v.push(format!("choice block {i} ({:?}) holds a {:?} candidate", b.block_type, c));
            }
            if b.block_type != BlockType::Pooling && (b.channel_options.is_empty() || b.channel_options.contains(&0)) {
                v.push(format!("choice block {i} needs positive channel options"));
            }
            if b.repeat_options.contains(&0) {
                v.push(format!("choice block {i} has a zero repeat option"));
            }
            for c in &b.candidates {
                if let Candidate::Transformer { heads, .. } = c {
                    if let Some(w) = b.channel_options.iter().find(|&&w| *heads == 0 || w % heads != 0) {
                        v.push(format!("choice block {i}: width {w} is not divisible by {heads} heads"));
                    }
                }
            }
        }
        if self.blocks.last().map(|b| b.block_type) != Some(BlockType::Pooling) {
            v.push("the last choice block must be a pooling block".into());
        }
        if self.num_classes == 0 {
            v.push("class count must be positive".into());
        }
        v
    }
}

/// Draws one selection per choice block.
pub fn sample_path<R: Rng + ?Sized>(supernet: &SupernetSpec, rng: &mut R) -> Vec<PathChoice> {
    supernet
        .blocks
        .iter()
        .map(|b| {
            let candidate = rng.gen_range(0..b.candidates.len());
            let ch = b.channels();
            let channels = ch[rng.gen_range(0..ch.len())];
            let rep = b.repeats();
            let repeats = rep[rng.gen_range(0..rep.len())];
            PathChoice { candidate, channels, repeats }
        })
        .collect()
}

/// Every selection vector, in lexicographic block order.
pub fn enumerate_paths(supernet: &SupernetSpec) -> Vec<Vec<PathChoice>> {
    let mut paths = vec![Vec::new()];
    for b in &supernet.blocks {
        let mut next = Vec::with_capacity(paths.len() * b.choice_count());
        for p in &paths {
            for candidate in 0..b.candidates.len() {
                for &channels in b.channels() {
                    for &repeats in b.repeats() {
                        let mut q: Vec<PathChoice> = p.clone();
                        q.push(PathChoice { candidate, channels, repeats });
                        next.push(q);
                    }
                }
            }
        }
        paths = next;
    }
    paths
}

struct Builder {
    g: ModelGraph,
    cur: NodeRef,
    channels: usize,
    tag: BlockTag,
}

impl Builder {
    fn push(&mut self, kind: LayerKind, attrs: LayerAttrs, inputs: Vec<NodeRef>) -> NodeRef {
        let mut l = LayerSpec::new(kind, attrs, inputs);
        l.tag = Some(self.tag);
        self.cur = self.g.push(l);
        self.cur
    }

    fn chain(&mut self, kind: LayerKind, attrs: LayerAttrs) -> NodeRef {
        let from = self.cur;
        self.push(kind, attrs, vec![from])
    }

    fn conv(&mut self, kind: LayerKind, out: usize, stride: usize, relu: bool, expansion: Option<usize>) {
        self.chain(kind, LayerAttrs { out_channels: Some(out), stride, relu, expansion, ..Default::default() });
        self.channels = out;
    }
}

/// Flattens a selection into a shape-annotated graph without parameters.
pub fn build_path(supernet: &SupernetSpec, path: &[PathChoice]) -> Result<ModelGraph> {
    if path.len() != supernet.blocks.len() {
        return Err(Error::InvalidConfig(format!("path has {} choices for {} blocks", path.len(), supernet.blocks.len())));
    }
    let channels = *supernet.input_shape.last().ok_or_else(|| Error::InvalidConfig("supernet input shape is empty".into()))?;
    let mut b = Builder {
        g: ModelGraph::new(supernet.input_shape.clone(), supernet.input_q),
        cur: NodeRef::Input,
        channels,
        tag: BlockTag { block: 0, candidate: 0 },
    };
    for (i, (block, choice)) in supernet.blocks.iter().zip(path).enumerate() {
        let cand = *block.candidates.get(choice.candidate).ok_or_else(|| {
            Error::InvalidConfig(format!("block {i} has no candidate {}", choice.candidate))
        })?;
        b.tag = BlockTag { block: i, candidate: choice.candidate };
        let width = choice.channels;
        match cand {
            Candidate::Conv3x3Down => b.conv(LayerKind::Conv3x3, width, 2, true, None),
            Candidate::ConvMaxPoolDown => b.conv(LayerKind::ConvMaxPool, width, 1, true, None),
            Candidate::InvertedResidual { expansion } => {
                for _ in 0..choice.repeats.max(1) {
                    let (start, cin) = (b.cur, b.channels);
                    b.conv(LayerKind::Conv1x1, cin * expansion, 1, true, Some(expansion));
                    b.chain(LayerKind::DWConv3x3, LayerAttrs { relu: true, expansion: Some(expansion), ..Default::default() });
                    b.conv(LayerKind::Conv1x1, width, 1, false, Some(expansion));
                    if cin == width {
                        let last = b.cur;
                        b.push(LayerKind::ResidualAdd, LayerAttrs::default(), vec![start, last]);
                    }
                }
            }
            Candidate::Transformer { heads, mlp_ratio } => {
                let (start, cin) = (b.cur, b.channels);
                b.conv(LayerKind::Conv3x3, cin, 1, true, None);
                b.conv(LayerKind::Conv1x1, width, 1, false, None);
                for _ in 0..choice.repeats.max(1) {
                    b.chain(
                        LayerKind::Encoder,
                        LayerAttrs { heads: Some(heads), hidden: Some(width * mlp_ratio), ..Default::default() },
                    );
                }
                b.conv(LayerKind::Conv1x1, cin, 1, true, None);
                b.conv(LayerKind::Conv3x3, cin, 1, false, None);
                let last = b.cur;
                b.push(LayerKind::ResidualAdd, LayerAttrs::default(), vec![start, last]);
            }
            Candidate::SeqPool => {
                b.chain(LayerKind::SeqPool, LayerAttrs::default());
            }
            Candidate::AvgPool => {
                b.chain(LayerKind::AvgPool2x2, LayerAttrs::default());
            }
        }
    }
    let head = LayerAttrs { out_features: Some(supernet.num_classes), flatten: true, ..Default::default() };
    let from = b.cur;
    b.g.push(LayerSpec::chain(LayerKind::Linear, head, from));
    infer_shapes(&b.g)
}

/// Samples one candidate, width and repeat count per block and builds the
/// resulting graph. The same seed always yields the same graph.
pub fn sample_single_path(supernet: &SupernetSpec, seed: u64) -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_path(supernet, &sample_path(supernet, &mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::validate_graph;

    #[test]
    fn default_supernet_has_two_dots() {
        let s = SupernetSpec::default_dot();
        assert_eq!(s.dot_count(), 2);
        assert!(s.violations().is_empty());
    }

    #[test]
    fn every_default_path_is_valid() {
        let s = SupernetSpec::default_dot();
        for seed in 0..20 {
            let g = sample_single_path(&s, seed).unwrap();
            assert_eq!(validate_graph(&g), vec![], "seed {seed}");
            assert_eq!(g.output_shape().unwrap(), &[10]);
        }
    }

    #[test]
    fn enumeration_covers_all_paths() {
        let s = SupernetSpec::default_dot();
        assert_eq!(enumerate_paths(&s).len(), s.path_count());
    }

    #[test]
    fn single_candidate_block_flagged() {
        let mut s = SupernetSpec::default_dot();
        s.blocks[0].candidates.truncate(1);
        assert_eq!(s.violations().len(), 1);
    }
}
