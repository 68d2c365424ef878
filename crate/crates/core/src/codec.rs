//! Blockwise run-length coding of pruned INT8 weights.
//!
//! A pruned tensor is flattened and cut into aligned blocks of `b` elements.
//! Every nonzero block becomes one record `[d:u8][v1:i8]..[vb:i8]`, where `d`
//! is the number of elements between the end of the previous record (or the
//! array start) and the start of this one. Gaps longer than 255 elements are
//! bridged with all-zero padding records. Elements past the last whole block
//! (when the length is not a multiple of `b`) are kept verbatim in a dense
//! trailer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest gap a single record can express.
pub const MAX_DISTANCE: usize = u8::MAX as usize;

/// Per-layer pruning and coding configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseConfig {
    /// Fraction of blocks pruned, in `[0, 1)`.
    pub sparsity: f64,
    /// Block length `b`; 3 is reserved for depthwise kernel rows.
    pub block_size: usize,
}

impl SparseConfig {
    pub fn new(sparsity: f64, block_size: usize) -> Result<Self> {
        let cfg = Self { sparsity, block_size };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::InvalidConfig(format!("sparsity must lie in [0, 1), got {}", self.sparsity)));
        }
        if !(2..=4).contains(&self.block_size) {
            return Err(Error::InvalidConfig(format!("block size must be 2, 3 or 4, got {}", self.block_size)));
        }
        Ok(())
    }

    /// Number of blocks zeroed out of `n_blocks`: `floor(rho * n)`.
    ///
    /// A 1e-9 guard absorbs representation error in products such as
    /// `0.29 * 100`.
    pub fn pruned_blocks(&self, n_blocks: usize) -> usize {
        ((self.sparsity * n_blocks as f64 + 1e-9).floor() as usize).min(n_blocks)
    }

    pub fn compression_ratio(&self) -> f64 {
        compression_ratio(self)
    }
}

/// Analytic dense/sparse size ratio `1 / ((1 - rho) * (1 + 1/b))`.
pub fn compression_ratio(cfg: &SparseConfig) -> f64 {
    1.0 / ((1.0 - cfg.sparsity) * (1.0 + 1.0 / cfg.block_size as f64))
}

/// Run-length coded weights plus the header fields needed to decode them.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedWeights {
    stream: Vec<u8>,
    block_size: usize,
    original_len: usize,
    n_records: usize,
    padding_records: usize,
    trailer: Vec<u8>,
}

/// One contiguous run of stored values: a record payload or the trailer.
#[derive(Debug, Clone, Copy)]
pub struct Run<'a> {
    /// Flat element index of the first value.
    pub start: usize,
    /// Raw INT8 values (reinterpret each byte as `i8`).
    pub values: &'a [u8],
}

/// Resumable position inside an encoded stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunCursor {
    byte: usize,
    pos: usize,
    trailer_done: bool,
}

/// Iterator over the stored runs of an [`EncodedWeights`].
#[derive(Debug, Clone)]
pub struct Runs<'a> {
    enc: &'a EncodedWeights,
    cur: RunCursor,
}

impl<'a> Runs<'a> {
    /// Cursor positioned at the next run this iterator would yield.
    pub fn cursor(&self) -> RunCursor {
        self.cur
    }
}

impl<'a> Iterator for Runs<'a> {
    type Item = Run<'a>;

    #[inline]
    fn next(&mut self) -> Option<Run<'a>> {
        let b = self.enc.block_size;
        let stream = &self.enc.stream;
        if self.cur.byte < stream.len() {
            let d = stream[self.cur.byte] as usize;
            let start = self.cur.pos + d;
            let values = &stream[self.cur.byte + 1..self.cur.byte + 1 + b];
            self.cur.byte += 1 + b;
            self.cur.pos = start + b;
            return Some(Run { start, values });
        }
        if !self.cur.trailer_done && !self.enc.trailer.is_empty() {
            self.cur.trailer_done = true;
            return Some(Run { start: self.enc.main_len(), values: &self.enc.trailer });
        }
        None
    }
}

impl EncodedWeights {
    /// Rebuilds an encoding from its parts, validating the record grammar.
    pub fn from_parts(stream: Vec<u8>, block_size: usize, original_len: usize, n_records: usize, trailer: Vec<u8>) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::CorruptStream("block size 0".into()));
        }
        if stream.len() != n_records * (1 + block_size) {
            return Err(Error::CorruptStream(format!(
                "stream holds {} bytes, expected {} records x {} bytes",
                stream.len(),
                n_records,
                1 + block_size
            )));
        }
        if trailer.len() != original_len % block_size {
            return Err(Error::CorruptStream(format!(
                "trailer holds {} values, expected {}",
                trailer.len(),
                original_len % block_size
            )));
        }
        let main_len = original_len - trailer.len();
        let mut pos = 0usize;
        let mut padding = 0usize;
        for rec in stream.chunks_exact(1 + block_size) {
            let start = pos + rec[0] as usize;
            pos = start + block_size;
            if pos > main_len {
                return Err(Error::CorruptStream(format!("record ends at element {pos}, past length {main_len}")));
            }
            if rec[1..].iter().all(|&v| v == 0) {
                padding += 1;
            }
        }
        Ok(Self { stream, block_size, original_len, n_records, padding_records: padding, trailer })
    }

    pub fn stream(&self) -> &[u8] {
        &self.stream
    }

    pub fn trailer(&self) -> &[u8] {
        &self.trailer
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn original_len(&self) -> usize {
        self.original_len
    }

    pub fn n_records(&self) -> usize {
        self.n_records
    }

    /// Records that carry no data and only bridge gaps wider than 255.
    pub fn padding_records(&self) -> usize {
        self.padding_records
    }

    /// Length of the block-aligned region covered by the record stream.
    pub fn main_len(&self) -> usize {
        self.original_len - self.trailer.len()
    }

    /// Bytes needed to store this encoding: stream plus dense trailer.
    pub fn stored_bytes(&self) -> usize {
        self.stream.len() + self.trailer.len()
    }

    /// Stored bytes without the gap-bridging padding records.
    pub fn raw_bytes(&self) -> usize {
        self.stored_bytes() - self.padding_records * (1 + self.block_size)
    }

    /// Number of values held in data (non-padding) records and the trailer.
    pub fn stored_values(&self) -> usize {
        (self.n_records - self.padding_records) * self.block_size + self.trailer.len()
    }

    pub fn runs(&self) -> Runs<'_> {
        Runs { enc: self, cur: RunCursor::default() }
    }

    pub fn runs_from(&self, cursor: RunCursor) -> Runs<'_> {
        Runs { enc: self, cur: cursor }
    }
}

/// Encodes a blockwise-pruned tensor. Fails with [`Error::UnalignedSparsity`]
/// when a block mixes zero and nonzero values.
pub fn encode_blockwise_rle(weights: &[i8], cfg: &SparseConfig) -> Result<EncodedWeights> {
    encode_impl(weights, cfg.block_size, true)
}

/// Like [`encode_blockwise_rle`] but stores partially-zero blocks verbatim.
///
/// Quantized survivors of pruning may legitimately round to 0; this variant
/// is lossless for any input and is what the package compiler uses.
pub fn encode_blockwise_rle_lossless(weights: &[i8], block_size: usize) -> EncodedWeights {
    encode_impl(weights, block_size, false).expect("lenient encoding cannot fail")
}

fn encode_impl(weights: &[i8], b: usize, strict: bool) -> Result<EncodedWeights> {
    assert!(b > 0, "block size must be positive");
    let main_len = weights.len() / b * b;
    let mut stream = Vec::new();
    let mut n_records = 0usize;
    let mut padding = 0usize;
    let mut cursor = 0usize;
    for (blk, chunk) in weights[..main_len].chunks_exact(b).enumerate() {
        let nonzero = chunk.iter().filter(|&&v| v != 0).count();
        if nonzero == 0 {
            continue;
        }
        let start = blk * b;
        if strict && nonzero != b {
            return Err(Error::UnalignedSparsity { index: start });
        }
        let mut gap = start - cursor;
        while gap > MAX_DISTANCE {
            // Padding must end at or before the real block, hence the `gap - b` cap.
            let d = MAX_DISTANCE.min(gap - b);
            stream.push(d as u8);
            stream.extend(std::iter::repeat(0u8).take(b));
            n_records += 1;
            padding += 1;
            gap -= d + b;
        }
        stream.push(gap as u8);
        stream.extend(chunk.iter().map(|&v| v as u8));
        n_records += 1;
        cursor = start + b;
    }
    let trailer = weights[main_len..].iter().map(|&v| v as u8).collect();
    Ok(EncodedWeights {
        stream,
        block_size: b,
        original_len: weights.len(),
        n_records,
        padding_records: padding,
        trailer,
    })
}

/// Expands an encoding back to the dense flat array.
pub fn decode_blockwise_rle(enc: &EncodedWeights) -> Result<Vec<i8>> {
    let b = enc.block_size;
    if enc.stream.len() != enc.n_records * (1 + b) {
        return Err(Error::CorruptStream("stream length disagrees with record count".into()));
    }
    let mut out = vec![0i8; enc.original_len];
    let main_len = enc.main_len();
    let mut pos = 0usize;
    for rec in enc.stream.chunks_exact(1 + b) {
        let start = pos + rec[0] as usize;
        if start + b > main_len {
            return Err(Error::CorruptStream(format!(
                "record at element {start} overruns length {}",
                enc.original_len
            )));
        }
        for (dst, &v) in out[start..start + b].iter_mut().zip(&rec[1..]) {
            *dst = v as i8;
        }
        pos = start + b;
    }
    for (dst, &v) in out[main_len..].iter_mut().zip(&enc.trailer) {
        *dst = v as i8;
    }
    Ok(out)
}

/// Weights in whichever representation the adaptive strategy picked.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredWeights {
    Dense(Vec<i8>),
    Sparse(EncodedWeights),
}

impl StoredWeights {
    pub fn byte_len(&self) -> usize {
        match self {
            StoredWeights::Dense(v) => v.len(),
            StoredWeights::Sparse(e) => e.stored_bytes(),
        }
    }

    /// Number of weight elements represented (dense length).
    pub fn element_len(&self) -> usize {
        match self {
            StoredWeights::Dense(v) => v.len(),
            StoredWeights::Sparse(e) => e.original_len(),
        }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self, StoredWeights::Sparse(_))
    }

    pub fn to_dense(&self) -> Vec<i8> {
        match self {
            StoredWeights::Dense(v) => v.clone(),
            StoredWeights::Sparse(e) => decode_blockwise_rle(e).expect("validated encoding"),
        }
    }

    pub fn nonzero_count(&self) -> usize {
        match self {
            StoredWeights::Dense(v) => v.iter().filter(|&&x| x != 0).count(),
            StoredWeights::Sparse(e) => e.runs().map(|r| r.values.iter().filter(|&&x| x != 0).count()).sum(),
        }
    }
}

/// Picks the smaller of dense and sparse storage; ties stay dense.
pub fn choose_storage_format(weights: &[i8], cfg: &SparseConfig) -> Result<StoredWeights> {
    let enc = encode_blockwise_rle(weights, cfg)?;
    Ok(pick(weights, enc))
}

/// [`choose_storage_format`] over the lossless encoder.
pub fn choose_storage_format_lossless(weights: &[i8], block_size: usize) -> StoredWeights {
    pick(weights, encode_blockwise_rle_lossless(weights, block_size))
}

fn pick(weights: &[i8], enc: EncodedWeights) -> StoredWeights {
    if enc.stored_bytes() < weights.len() {
        StoredWeights::Sparse(enc)
    } else {
        StoredWeights::Dense(weights.to_vec())
    }
}

/// Sparse byte count predicted from the configuration alone, assuming no
/// padding records: kept blocks times `1 + b`, plus the dense trailer.
pub fn estimate_sparse_bytes(len: usize, cfg: &SparseConfig) -> usize {
    let b = cfg.block_size;
    let n_blocks = len / b;
    let kept = n_blocks - cfg.pruned_blocks(n_blocks);
    kept * (1 + b) + len % b
}

/// Adaptive storage size predicted without weights: `min(dense, sparse)`.
pub fn estimate_stored_bytes(len: usize, cfg: Option<&SparseConfig>) -> usize {
    match cfg {
        Some(c) => {
            let s = estimate_sparse_bytes(len, c);
            if s < len {
                s
            } else {
                len
            }
        }
        None => len,
    }
}
