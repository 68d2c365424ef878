//! Binary deployment package.
//!
//! All integers are little-endian.
//!
//! ```text
//! header   64 B  magic "TFPK", version u16, flags u16, layer count u32,
//!                arena size u32, plan/table/blob offsets u32, total length
//!                u32, input rank u32, input dims 4 x u32, input scale f32,
//!                input zero point i8, padding
//! plan           (2n + 1) x 20 B: offset, len, first step, last step (u32),
//!                end u8, 3 B padding; buffers first, then scratch
//! table          one variable-length record per layer, each ending in a
//!                blob reference (offset u32, len u32) into the blob section
//! blobs          serialized parameters, sparse streams kept verbatim
//! ```

use super::compile::compile;
use super::plan::{check_plan, plan_memory, BufferPlacement, End, MemoryPlan};
use super::resource::{resource_eval_graph, Budgets, PACKAGE_HEADER_BYTES};
use crate::codec::{EncodedWeights, SparseConfig, StoredWeights};
use crate::error::{Error, Result};
use crate::ir::{infer_shapes, BlockTag, LayerAttrs, LayerKind, LayerSpec, ModelGraph, NodeRef};
use crate::params::{EncoderParams, LayerParams, LinearParams, NormLayer, NormParams, QWeights};
use crate::tensor::QuantParams;

pub const PACKAGE_MAGIC: [u8; 4] = *b"TFPK";
pub const PACKAGE_VERSION: u16 = 1;

const PLAN_RECORD_BYTES: usize = 20;
const MAX_INPUT_RANK: usize = 4;
const NONE_U32: u32 = u32::MAX;

/// A compiled graph together with its arena plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Package {
    pub graph: ModelGraph,
    pub plan: MemoryPlan,
}

impl Package {
    /// Shape-infers, compiles and plans `graph`.
    pub fn build(graph: &ModelGraph) -> Result<Self> {
        let graph = compile(&infer_shapes(graph)?)?;
        let plan = plan_memory(&graph)?;
        Ok(Self { graph, plan })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let g = &self.graph;
        if g.input_shape.len() > MAX_INPUT_RANK {
            return Err(Error::MalformedPackage(format!("input rank {} exceeds {MAX_INPUT_RANK}", g.input_shape.len())));
        }
        let mut plan = Writer::default();
        for b in self.plan.buffers.iter().chain(&self.plan.scratch) {
            plan.u32(b.offset)?;
            plan.u32(b.len)?;
            plan.u32(b.first_step)?;
            plan.u32(b.last_step)?;
            plan.u8(matches!(b.end, End::Tail) as u8);
            plan.bytes(&[0; 3]);
        }
        let mut table = Writer::default();
        let mut blobs = Writer::default();
        for l in &g.layers {
            let start = blobs.buf.len();
            if let Some(p) = &l.params {
                write_params(&mut blobs, p)?;
            }
            write_layer(&mut table, l, start, blobs.buf.len() - start)?;
        }

        let plan_off = PACKAGE_HEADER_BYTES;
        let table_off = plan_off + plan.buf.len();
        let blob_off = table_off + table.buf.len();
        let total = blob_off + blobs.buf.len();
        let mut h = Writer::default();
        h.bytes(&PACKAGE_MAGIC);
        h.u16(PACKAGE_VERSION);
        h.u16(0);
        h.u32(g.layers.len())?;
        h.u32(self.plan.arena_size)?;
        h.u32(plan_off)?;
        h.u32(table_off)?;
        h.u32(blob_off)?;
        h.u32(total)?;
        h.u32(g.input_shape.len())?;
        for k in 0..MAX_INPUT_RANK {
            h.u32(g.input_shape.get(k).copied().unwrap_or(0))?;
        }
        h.q(g.input_q);
        h.buf.resize(PACKAGE_HEADER_BYTES, 0);

        let mut out = h.buf;
        out.extend(plan.buf);
        out.extend(table.buf);
        out.extend(blobs.buf);
        Ok(out)
    }
}

/// Builds a package and serializes it.
///
/// Fails with [`Error::BudgetExceeded`] when the model does not fit, unless
/// `override_budget` is set.
pub fn emit_package(graph: &ModelGraph, budgets: &Budgets, override_budget: bool) -> Result<Vec<u8>> {
    let pkg = Package::build(graph)?;
    let r = resource_eval_graph(&pkg.graph, budgets)?;
    if !r.fits() && !override_budget {
        return Err(Error::BudgetExceeded {
            storage: r.storage_bytes,
            storage_limit: budgets.storage,
            memory: r.peak_memory_bytes,
            memory_limit: budgets.memory,
        });
    }
    pkg.to_bytes()
}

/// Parses and checks a package produced by [`emit_package`].
pub fn load_package(bytes: &[u8]) -> Result<Package> {
    if bytes.len() < 4 || bytes[..4] != PACKAGE_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < PACKAGE_HEADER_BYTES {
        return Err(malformed("truncated header"));
    }
    let mut h = Reader::new(&bytes[..PACKAGE_HEADER_BYTES]);
    h.skip(4)?;
    let version = h.u16()?;
    if version != PACKAGE_VERSION {
        return Err(malformed(format!("unsupported version {version}")));
    }
    let _flags = h.u16()?;
    let n = h.usize()?;
    let arena_size = h.usize()?;
    let (plan_off, table_off, blob_off, total) = (h.usize()?, h.usize()?, h.usize()?, h.usize()?);
    if total != bytes.len() || !(PACKAGE_HEADER_BYTES <= plan_off && plan_off <= table_off && table_off <= blob_off && blob_off <= total) {
        return Err(malformed("section offsets are inconsistent with the file length"));
    }
    let rank = h.usize()?;
    if rank > MAX_INPUT_RANK {
        return Err(malformed(format!("input rank {rank}")));
    }
    let mut input_shape = Vec::with_capacity(rank);
    for k in 0..MAX_INPUT_RANK {
        let d = h.usize()?;
        if k < rank {
            input_shape.push(d);
        }
    }
    let input_q = h.q()?;

    let plan_bytes = &bytes[plan_off..table_off];
    if plan_bytes.len() != (2 * n + 1) * PLAN_RECORD_BYTES {
        return Err(malformed("plan section size does not match the layer count"));
    }
    let mut p = Reader::new(plan_bytes);
    let mut regions = Vec::with_capacity(2 * n + 1);
    for _ in 0..2 * n + 1 {
        let (offset, len, first_step, last_step) = (p.usize()?, p.usize()?, p.usize()?, p.usize()?);
        let end = if p.u8()? == 0 { End::Head } else { End::Tail };
        p.skip(3)?;
        regions.push(BufferPlacement { offset, len, end, first_step, last_step });
    }
    let scratch = regions.split_off(n + 1);
    let plan = MemoryPlan { arena_size, buffers: regions, scratch };
    if !check_plan(&plan).is_empty() {
        return Err(malformed("plan has overlapping live regions"));
    }

    let blobs = &bytes[blob_off..];
    let mut t = Reader::new(&bytes[table_off..blob_off]);
    let mut graph = ModelGraph::new(input_shape, input_q);
    for i in 0..n {
        let layer = read_layer(&mut t, blobs).map_err(|e| match e {
            Error::MalformedPackage(m) => malformed(format!("layer {i}: {m}")),
            other => other,
        })?;
        graph.layers.push(layer);
    }
    if !t.done() {
        return Err(malformed("trailing bytes in the layer table"));
    }
    let inferred = infer_shapes(&graph)?;
    if inferred.layers.iter().zip(&graph.layers).any(|(a, b)| a.out_shape != b.out_shape) {
        return Err(malformed("stored shapes disagree with the graph"));
    }
    for (k, b) in plan.buffers.iter().enumerate() {
        let node = if k == 0 { NodeRef::Input } else { NodeRef::Layer(k - 1) };
        let want: usize = graph.node_shape(node).map_or(0, |s| s.iter().product());
        if n > 0 && b.len != want {
            return Err(malformed(format!("buffer {k} holds {} bytes, node needs {want}", b.len)));
        }
    }
    Ok(Package { graph, plan })
}

fn malformed(m: impl Into<String>) -> Error {
    Error::MalformedPackage(m.into())
}

fn write_layer(w: &mut Writer, l: &LayerSpec, blob_off: usize, blob_len: usize) -> Result<()> {
    let a = &l.attrs;
    w.u8(l.kind.code());
    let flags = a.relu as u8
        | (a.flatten as u8) << 1
        | (l.params.is_some() as u8) << 2
        | (l.sparse_cfg.is_some() as u8) << 3
        | (l.tag.is_some() as u8) << 4;
    w.u8(flags);
    w.u8(l.inputs.len() as u8);
    for r in &l.inputs {
        w.i32(r.to_i64() as i32);
    }
    for v in [a.out_channels, Some(a.stride), a.heads, a.hidden, a.expansion, a.out_features] {
        w.opt_u32(v)?;
    }
    w.q(l.out_q);
    let shape = l.out_shape.as_deref().unwrap_or(&[]);
    w.u8(shape.len() as u8);
    for &d in shape {
        w.u32(d)?;
    }
    if let Some(c) = &l.sparse_cfg {
        w.f64(c.sparsity);
        w.u8(c.block_size as u8);
    }
    if let Some(t) = &l.tag {
        w.u32(t.block)?;
        w.u32(t.candidate)?;
    }
    w.u32(blob_off)?;
    w.u32(blob_len)
}

fn read_layer(r: &mut Reader<'_>, blobs: &[u8]) -> Result<LayerSpec> {
    let code = r.u8()?;
    let kind = LayerKind::from_code(code).ok_or_else(|| malformed(format!("unknown layer kind code {code}")))?;
    let flags = r.u8()?;
    let n_in = r.u8()? as usize;
    let mut inputs = Vec::with_capacity(n_in);
    for _ in 0..n_in {
        let v = r.i32()? as i64;
        inputs.push(NodeRef::from_i64(v).ok_or_else(|| malformed(format!("bad input reference {v}")))?);
    }
    let mut o = [None; 6];
    for v in &mut o {
        *v = r.opt_u32()?;
    }
    let attrs = LayerAttrs {
        out_channels: o[0],
        stride: o[1].unwrap_or(0),
        relu: flags & 1 != 0,
        heads: o[2],
        hidden: o[3],
        expansion: o[4],
        out_features: o[5],
        flatten: flags & 2 != 0,
    };
    let out_q = r.q()?;
    let rank = r.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.usize()?);
    }
    let sparse_cfg = if flags & 8 != 0 {
        let sparsity = r.f64()?;
        let b = r.u8()? as usize;
        Some(SparseConfig::new(sparsity, b).map_err(|e| malformed(e.to_string()))?)
    } else {
        None
    };
    let tag = if flags & 16 != 0 { Some(BlockTag { block: r.usize()?, candidate: r.usize()? }) } else { None };
    let (off, len) = (r.usize()?, r.usize()?);
    let params = if flags & 4 != 0 {
        let blob = off
            .checked_add(len)
            .and_then(|end| blobs.get(off..end))
            .ok_or_else(|| malformed("parameter blob lies outside the blob section"))?;
        let mut br = Reader::new(blob);
        let p = read_params(&mut br)?;
        if !br.done() {
            return Err(malformed("parameter blob has trailing bytes"));
        }
        Some(p)
    } else {
        None
    };
    Ok(LayerSpec {
        kind,
        attrs,
        inputs,
        params,
        out_q,
        sparse_cfg,
        out_shape: Some(shape),
        tag,
    })
}

fn write_weights(w: &mut Writer, q: &QWeights) -> Result<()> {
    w.u8(q.shape.len() as u8);
    for &d in &q.shape {
        w.u32(d)?;
    }
    w.q(q.qparams);
    w.u32(q.bias.len())?;
    for &b in &q.bias {
        w.i32(b);
    }
    match &q.store {
        StoredWeights::Dense(v) => {
            w.u8(0);
            w.u32(v.len())?;
            w.bytes(&v.iter().map(|&x| x as u8).collect::<Vec<_>>());
        }
        StoredWeights::Sparse(e) => {
            w.u8(1);
            w.u8(e.block_size() as u8);
            w.u32(e.original_len())?;
            w.u32(e.n_records())?;
            w.u32(e.stream().len())?;
            w.bytes(e.stream());
            w.u32(e.trailer().len())?;
            w.bytes(e.trailer());
        }
    }
    Ok(())
}

fn read_weights(r: &mut Reader<'_>) -> Result<QWeights> {
    let rank = r.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.usize()?);
    }
    let qparams = r.q()?;
    let nb = r.usize()?;
    let mut bias = Vec::with_capacity(nb.min(r.remaining() / 4));
    for _ in 0..nb {
        bias.push(r.i32()?);
    }
    let numel: usize = shape.iter().product();
    if shape.first().copied() != Some(bias.len()) {
        return Err(malformed("bias length does not match the weight shape"));
    }
    let store = match r.u8()? {
        0 => {
            let n = r.usize()?;
            StoredWeights::Dense(r.take(n)?.iter().map(|&x| x as i8).collect())
        }
        1 => {
            let b = r.u8()? as usize;
            let original_len = r.usize()?;
            let n_records = r.usize()?;
            let sl = r.usize()?;
            let stream = r.take(sl)?.to_vec();
            let tl = r.usize()?;
            let trailer = r.take(tl)?.to_vec();
            StoredWeights::Sparse(EncodedWeights::from_parts(stream, b, original_len, n_records, trailer)?)
        }
        t => return Err(malformed(format!("unknown storage tag {t}"))),
    };
    if store.element_len() != numel {
        return Err(malformed(format!("weights hold {} elements, shape needs {numel}", store.element_len())));
    }
    Ok(QWeights { store, shape, qparams, bias })
}

fn write_norm(w: &mut Writer, n: &NormParams) -> Result<()> {
    w.u32(n.gamma.len())?;
    w.bytes(&n.gamma.iter().map(|&x| x as u8).collect::<Vec<_>>());
    for &b in &n.beta {
        w.i32(b);
    }
    w.f32(n.gamma_scale);
    Ok(())
}

fn read_norm(r: &mut Reader<'_>) -> Result<NormParams> {
    let c = r.usize()?;
    let gamma = r.take(c)?.iter().map(|&x| x as i8).collect();
    let mut beta = Vec::with_capacity(c);
    for _ in 0..c {
        beta.push(r.i32()?);
    }
    Ok(NormParams { gamma, beta, gamma_scale: r.f32()? })
}

fn write_params(w: &mut Writer, p: &LayerParams) -> Result<()> {
    match p {
        LayerParams::Weights(q) => {
            w.u8(0);
            write_weights(w, q)
        }
        LayerParams::SeqPool { attn, logit_q } => {
            w.u8(1);
            write_weights(w, attn)?;
            w.q(*logit_q);
            Ok(())
        }
        LayerParams::Norm(n) => {
            w.u8(2);
            write_norm(w, n)
        }
        LayerParams::Encoder(e) => {
            w.u8(3);
            w.u32(e.heads)?;
            for n in [&e.ln1, &e.ln2] {
                write_norm(w, &n.norm)?;
                w.q(n.out_q);
            }
            for l in e.linears() {
                write_weights(w, &l.weights)?;
                w.q(l.out_q);
            }
            w.q(e.score_q);
            w.q(e.attn_q);
            w.q(e.resid_q);
            Ok(())
        }
    }
}

fn read_params(r: &mut Reader<'_>) -> Result<LayerParams> {
    Ok(match r.u8()? {
        0 => LayerParams::Weights(read_weights(r)?),
        1 => {
            let attn = read_weights(r)?;
            LayerParams::SeqPool { attn, logit_q: r.q()? }
        }
        2 => LayerParams::Norm(read_norm(r)?),
        3 => {
            let heads = r.usize()?;
            let mut norm = || -> Result<NormLayer> {
                let norm = read_norm(r)?;
                Ok(NormLayer { norm, out_q: r.q()? })
            };
            let ln1 = norm()?;
            let ln2 = norm()?;
            let mut lin = || -> Result<LinearParams> {
                let weights = read_weights(r)?;
                Ok(LinearParams { weights, out_q: r.q()? })
            };
            let (wq, wk, wv, proj, fc1, fc2) = (lin()?, lin()?, lin()?, lin()?, lin()?, lin()?);
            let (score_q, attn_q, resid_q) = (r.q()?, r.q()?, r.q()?);
            LayerParams::Encoder(Box::new(EncoderParams {
                heads,
                ln1,
                wq,
                wk,
                wv,
                score_q,
                attn_q,
                proj,
                resid_q,
                ln2,
                fc1,
                fc2,
            }))
        }
        t => return Err(malformed(format!("unknown parameter tag {t}"))),
    })
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| malformed(format!("value {v} does not fit in 32 bits")))?;
        self.bytes(&v.to_le_bytes());
        Ok(())
    }
    fn opt_u32(&mut self, v: Option<usize>) -> Result<()> {
        match v {
            Some(x) if x as u64 >= NONE_U32 as u64 => Err(malformed(format!("attribute {x} too large"))),
            Some(x) => self.u32(x),
            None => self.u32(NONE_U32 as usize),
        }
    }
    fn i32(&mut self, v: i32) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn q(&mut self, q: QuantParams) {
        self.f32(q.scale);
        self.u8(q.zero_point as u8);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(malformed(format!("truncated: wanted {n} bytes at {}, {} left", self.pos, self.remaining())));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn skip(&mut self, n: usize) -> Result<()> {
        self.take(n).map(|_| ())
    }
    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.arr()?))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.arr()?) as usize)
    }
    fn opt_u32(&mut self) -> Result<Option<usize>> {
        let v = u32::from_le_bytes(self.arr()?);
        Ok((v != NONE_U32).then_some(v as usize))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.arr()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.arr()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
    fn q(&mut self) -> Result<QuantParams> {
        let scale = self.f32()?;
        let zp = self.u8()? as i8;
        QuantParams::new(scale, zp).map_err(|e| malformed(e.to_string()))
    }
}
