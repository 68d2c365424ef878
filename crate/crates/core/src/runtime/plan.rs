//! Head/tail alternating arena placement.
//!
//! Buffers are placed from either end of one arena. The graph input starts
//! at the head; every layer writes its output at the end opposite to the
//! buffer holding its first input, taking the lowest free slot on that side
//! among buffers still alive. A layer's scratch goes on the same side as its
//! output and lives for that step only. The arena is sized to the largest
//! sum of head and tail extents over all steps, so the two sides never meet.

use crate::error::Result;
use crate::ir::{infer_shapes, LayerKind, LayerSpec, ModelGraph, NodeRef};
use crate::kernels::{encoder_scratch_bytes, seqpool_scratch_bytes};
use crate::params::LayerParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum End {
    Head,
    Tail,
}

impl End {
    fn flip(self) -> Self {
        match self {
            End::Head => End::Tail,
            End::Tail => End::Head,
        }
    }
}

/// One activation or scratch region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferPlacement {
    /// Absolute byte offset in the arena.
    pub offset: usize,
    pub len: usize,
    pub end: End,
    /// First and last execution step (inclusive) at which it is live.
    pub first_step: usize,
    pub last_step: usize,
}

impl BufferPlacement {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryPlan {
    pub arena_size: usize,
    /// Index 0 is the graph input; index `k + 1` is layer `k`'s output.
    pub buffers: Vec<BufferPlacement>,
    /// Per-layer scratch; `len == 0` when a layer needs none.
    pub scratch: Vec<BufferPlacement>,
}

impl MemoryPlan {
    pub fn node(&self, r: NodeRef) -> &BufferPlacement {
        match r {
            NodeRef::Input => &self.buffers[0],
            NodeRef::Layer(i) => &self.buffers[i + 1],
        }
    }

    /// Sum of live bytes at `step`.
    pub fn live_bytes(&self, step: usize) -> usize {
        let live = |b: &&BufferPlacement| b.first_step <= step && step <= b.last_step;
        self.buffers.iter().filter(live).map(|b| b.len).sum::<usize>()
            + self.scratch.get(step).map_or(0, |s| s.len)
    }
}

/// Scratch bytes a layer needs beyond its input and output buffers.
pub fn scratch_bytes(layer: &LayerSpec, in_shape: &[usize]) -> usize {
    let c = in_shape.last().copied().unwrap_or(0).max(1);
    let tokens = in_shape.iter().product::<usize>() / c;
    match layer.kind {
        LayerKind::SeqPool => seqpool_scratch_bytes(tokens),
        LayerKind::Encoder => {
            let hidden = match &layer.params {
                Some(LayerParams::Encoder(e)) => e.hidden(),
                _ => layer.attrs.hidden.unwrap_or(0),
            };
            encoder_scratch_bytes(tokens, c, hidden)
        }
        _ => 0,
    }
}

struct Slot {
    from_end: usize,
    len: usize,
    last_step: usize,
}

/// Lowest offset (from the side's edge) where `len` bytes fit among `live`.
fn first_fit(live: &[&Slot], len: usize) -> usize {
    let mut spans: Vec<(usize, usize)> = live.iter().filter(|s| s.len > 0).map(|s| (s.from_end, s.from_end + s.len)).collect();
    spans.sort_unstable();
    let mut at = 0;
    for (lo, hi) in spans {
        if lo >= at + len {
            break;
        }
        at = at.max(hi);
    }
    at
}

/// Places every activation buffer and scratch region.
pub fn plan_memory(graph: &ModelGraph) -> Result<MemoryPlan> {
    let g = infer_shapes(graph)?;
    let n = g.layers.len();
    let size = |r: NodeRef| g.node_shape(r).unwrap().iter().product::<usize>();

    // Last step at which each node is read; the final output lives to the end.
    let mut last_use = vec![0usize; n + 1];
    for (i, l) in g.layers.iter().enumerate() {
        last_use[i + 1] = i;
        for r in &l.inputs {
            let k = match *r {
                NodeRef::Input => 0,
                NodeRef::Layer(j) => j + 1,
            };
            last_use[k] = last_use[k].max(i);
        }
    }

    let mut sides: Vec<End> = Vec::with_capacity(n + 1);
    let mut slots: Vec<Slot> = Vec::with_capacity(n + 1);
    let mut scratch: Vec<(End, Slot)> = Vec::with_capacity(n);
    let mut arena = 0usize;

    sides.push(End::Head);
    slots.push(Slot { from_end: 0, len: if n == 0 { 0 } else { size(NodeRef::Input) }, last_step: last_use[0] });

    for (i, l) in g.layers.iter().enumerate() {
        let src = match l.inputs[0] {
            NodeRef::Input => 0,
            NodeRef::Layer(j) => j + 1,
        };
        let side = sides[src].flip();
        let live_on = |slots: &[Slot], sides: &[End], s: End| -> Vec<usize> {
            (0..slots.len()).filter(|&k| sides[k] == s && slots[k].last_step >= i).collect()
        };

        let out_len = size(NodeRef::Layer(i));
        let idx = live_on(&slots, &sides, side);
        let at = first_fit(&idx.iter().map(|&k| &slots[k]).collect::<Vec<_>>(), out_len);
        sides.push(side);
        slots.push(Slot { from_end: at, len: out_len, last_step: last_use[i + 1] });

        let in_shape = g.node_shape(l.inputs[0]).unwrap();
        let s_len = scratch_bytes(l, in_shape);
        let idx = live_on(&slots, &sides, side);
        let s_at = first_fit(&idx.iter().map(|&k| &slots[k]).collect::<Vec<_>>(), s_len);
        let s_slot = Slot { from_end: s_at, len: s_len, last_step: i };

        let extent = |s: End| -> usize {
            let mut e = live_on(&slots, &sides, s).iter().map(|&k| slots[k].from_end + slots[k].len).max().unwrap_or(0);
            if s == side && s_len > 0 {
                e = e.max(s_at + s_len);
            }
            e
        };
        arena = arena.max(extent(End::Head) + extent(End::Tail));
        scratch.push((side, s_slot));
    }

    let place = |side: End, s: &Slot, first_step: usize| BufferPlacement {
        offset: match side {
            End::Head => s.from_end,
            End::Tail => arena - s.from_end - s.len,
        },
        len: s.len,
        end: side,
        first_step,
        last_step: s.last_step,
    };
    let buffers = slots.iter().zip(&sides).enumerate().map(|(k, (s, &side))| place(side, s, k.saturating_sub(1))).collect();
    let scratch = scratch.iter().enumerate().map(|(i, (side, s))| place(*side, s, i)).collect();
    Ok(MemoryPlan { arena_size: arena, buffers, scratch })
}

/// Two regions that are live at the same step and share bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanConflict {
    pub a: BufferPlacement,
    pub b: BufferPlacement,
}

/// Brute-force pairwise check: no two simultaneously live regions overlap
/// and every region lies inside the arena.
pub fn check_plan(plan: &MemoryPlan) -> Vec<PlanConflict> {
    let regions: Vec<BufferPlacement> = plan.buffers.iter().chain(&plan.scratch).copied().filter(|b| b.len > 0).collect();
    let mut out = Vec::new();
    for (i, a) in regions.iter().enumerate() {
        if a.offset + a.len > plan.arena_size {
            out.push(PlanConflict { a: *a, b: *a });
        }
        for b in &regions[i + 1..] {
            let time = a.first_step <= b.last_step && b.first_step <= a.last_step;
            let space = a.offset < b.offset + b.len && b.offset < a.offset + a.len;
            if time && space {
                out.push(PlanConflict { a: *a, b: *b });
            }
        }
    }
    out
}
