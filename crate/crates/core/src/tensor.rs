//! Quantized tensors and the raw tensor file format used by the CLI.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Affine quantization parameters: `real = scale * (q - zero_point)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i8,
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: i8) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidConfig(format!("quantization scale must be positive, got {scale}")));
        }
        Ok(Self { scale, zero_point })
    }

    /// Unit scale, zero offset.
    pub const fn unit() -> Self {
        Self { scale: 1.0, zero_point: 0 }
    }

    pub fn is_valid(&self) -> bool {
        self.scale.is_finite() && self.scale > 0.0
    }

    /// Round-half-away-from-zero quantization with INT8 saturation.
    pub fn quantize(&self, x: f32) -> i8 {
        let q = (x as f64 / self.scale as f64).round() + self.zero_point as f64;
        q.clamp(-128.0, 127.0) as i8
    }

    pub fn dequantize(&self, q: i8) -> f32 {
        self.scale * (q as i32 - self.zero_point as i32) as f32
    }
}

impl Default for QuantParams {
    fn default() -> Self {
        Self::unit()
    }
}

/// A row-major INT8 tensor with per-tensor quantization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorI8 {
    shape: Vec<usize>,
    data: Vec<i8>,
    qparams: QuantParams,
}

impl TensorI8 {
    pub fn new(shape: Vec<usize>, data: Vec<i8>, qparams: QuantParams) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {n} elements but {} were supplied",
                data.len()
            )));
        }
        if !qparams.is_valid() {
            return Err(Error::InvalidConfig(format!("invalid scale {}", qparams.scale)));
        }
        Ok(Self { shape, data, qparams })
    }

    /// Tensor filled with the zero point (real value 0).
    pub fn zeros(shape: Vec<usize>, qparams: QuantParams) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![qparams.zero_point; n], qparams }
    }

    /// Uniformly random values; the same seed gives the same tensor.
    pub fn random(shape: Vec<usize>, qparams: QuantParams, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen::<i8>()).collect();
        Self { shape, data, qparams }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [i8] {
        &mut self.data
    }

    pub fn qparams(&self) -> QuantParams {
        self.qparams
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<i8>, QuantParams) {
        (self.shape, self.data, self.qparams)
    }

    pub fn dequantized(&self) -> Vec<f32> {
        self.data.iter().map(|&q| self.qparams.dequantize(q)).collect()
    }

    /// Index of the largest element; ties resolve to the lowest index.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, i8)> = None;
        for (i, &v) in self.data.iter().enumerate() {
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| i)
    }

    /// Writes the tensor as a one-line text header followed by raw INT8 bytes.
    ///
    /// Header: `shape=H,W,C scale=<f32> zero_point=<i8>\n`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        writeln!(w, "shape={} scale={} zero_point={}", dims.join(","), self.qparams.scale, self.qparams.zero_point)?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| v as u8).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let nl = buf
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse("tensor file: missing header line".into()))?;
        let header = std::str::from_utf8(&buf[..nl]).map_err(|_| Error::Parse("tensor file: header is not UTF-8".into()))?;
        let mut shape = None;
        let mut scale = None;
        let mut zero_point = None;
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("tensor file: bad header field `{field}`")))?;
            match key {
                "shape" => {
                    let dims: std::result::Result<Vec<usize>, _> = value.split(',').map(str::parse).collect();
                    shape = Some(dims.map_err(|_| Error::Parse(format!("tensor file: bad shape `{value}`")))?);
                }
                "scale" => scale = Some(value.parse::<f32>().map_err(|_| Error::Parse(format!("tensor file: bad scale `{value}`")))?),
                "zero_point" => {
                    zero_point = Some(value.parse::<i8>().map_err(|_| Error::Parse(format!("tensor file: bad zero_point `{value}`")))?)
                }
                other => return Err(Error::Parse(format!("tensor file: unknown header field `{other}`"))),
            }
        }
        let shape = shape.ok_or_else(|| Error::Parse("tensor file: header lacks shape".into()))?;
        let q = QuantParams::new(scale.unwrap_or(1.0), zero_point.unwrap_or(0))?;
        let data: Vec<i8> = buf[nl + 1..].iter().map(|&b| b as i8).collect();
        TensorI8::new(shape, data, q)
    }
}
