//! Dense 4-D tensors in NCHW layout, plus the `.nct` on-disk format.
//!
//! Layout contract: row-major NCHW. The flat index of element
//! `(b, c, y, x)` in a tensor of shape `(N, C, H, W)` is
//! `((b*C + c)*H + y)*W + x`. All serialization is little-endian.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Element dtype of a tensor. Only IEEE-754 binary32/binary64 are supported.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<Dtype> {
        match s {
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            _ => None,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Scalar element type for tensors: `f32` or `f64`.
///
/// The arithmetic surface is deliberately tiny — just what convolution,
/// normalization, and the activations need — so both float widths run the
/// exact same code paths.
pub trait Element:
    Copy
    + PartialOrd
    + PartialEq
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
{
    const DTYPE: Dtype;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    /// Decode from exactly `Self::DTYPE.size()` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;

    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sqrt(self) -> f32 {
        f32::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;

    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

/// Shape of a 4-D tensor: batch, channels, height, width. All dims >= 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape { n, c, h, w }
    }

    pub fn dims(self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// Element count, or an error if any dim is zero or the product
    /// overflows.
    pub fn checked_numel(self) -> Result<usize> {
        if self.dims().iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!(
                "all dimensions must be >= 1, got {self}"
            )));
        }
        self.n
            .checked_mul(self.c)
            .and_then(|v| v.checked_mul(self.h))
            .and_then(|v| v.checked_mul(self.w))
            .ok_or_else(|| Error::InvalidShape(format!("element count overflows usize: {self}")))
    }

    pub fn numel(self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat row-major NCHW offset of `(b, c, y, x)`.
    #[inline(always)]
    pub fn offset(self, b: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(b < self.n && c < self.c && y < self.h && x < self.w);
        ((b * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

impl serde::Serialize for Shape {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.dims().serialize(s)
    }
}

impl<'de> serde::Deserialize<'de> for Shape {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Shape, D::Error> {
        let dims = <[usize; 4]>::deserialize(d)?;
        Ok(Shape::new(dims[0], dims[1], dims[2], dims[3]))
    }
}

/// Owned dense 4-D tensor in row-major NCHW order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Shape,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    /// All-zero tensor.
    pub fn zeros(shape: Shape) -> Result<Tensor<E>> {
        let numel = shape.checked_numel()?;
        Ok(Tensor {
            shape,
            data: vec![E::ZERO; numel],
        })
    }

    /// Tensor filled with a constant.
    pub fn filled(shape: Shape, v: E) -> Result<Tensor<E>> {
        let numel = shape.checked_numel()?;
        Ok(Tensor {
            shape,
            data: vec![v; numel],
        })
    }

    /// Wrap an existing buffer. `data.len()` must equal the shape's element
    /// count.
    pub fn from_vec(shape: Shape, data: Vec<E>) -> Result<Tensor<E>> {
        let numel = shape.checked_numel()?;
        if data.len() != numel {
            return Err(Error::InvalidShape(format!(
                "buffer holds {} elements but shape {} needs {}",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Tensor of i.i.d. normal deviates drawn in flat row-major order, so a
    /// given `(seed, shape)` always produces the same tensor.
    pub fn random_normal(shape: Shape, rng: &mut Rng, mean: f64, std: f64) -> Result<Tensor<E>> {
        let numel = shape.checked_numel()?;
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(E::from_f64(rng.normal(mean, std)));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline(always)]
    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> E {
        self.data[self.shape.offset(b, c, y, x)]
    }

    #[inline(always)]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: E) {
        let i = self.shape.offset(b, c, y, x);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    /// The single element of a `(1,1,1,1)` tensor.
    pub fn scalar(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected a scalar (1x1x1x1) tensor, got {}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Elementwise map preserving shape.
    pub fn map(&self, f: impl Fn(E) -> E) -> Tensor<E> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Channels `lo..hi` (hi exclusive) of every batch element, copied into
    /// a new tensor of shape `(N, hi-lo, H, W)`.
    pub fn slice_channels(&self, lo: usize, hi: usize) -> Result<Tensor<E>> {
        if lo >= hi || hi > self.shape.c {
            return Err(Error::InvalidShape(format!(
                "channel slice {lo}..{hi} out of range for {} channels",
                self.shape.c
            )));
        }
        let plane = self.shape.h * self.shape.w;
        let out_shape = Shape::new(self.shape.n, hi - lo, self.shape.h, self.shape.w);
        let mut data = Vec::with_capacity(out_shape.numel());
        for b in 0..self.shape.n {
            let start = (b * self.shape.c + lo) * plane;
            data.extend_from_slice(&self.data[start..start + (hi - lo) * plane]);
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Concatenate along the channel axis. All parts must agree in batch and
    /// spatial dims.
    pub fn concat_channels(parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
        let first = *parts.first().ok_or_else(|| {
            Error::InvalidShape("concat_channels needs at least one tensor".into())
        })?;
        let (n, h, w) = (first.shape.n, first.shape.h, first.shape.w);
        let mut c_total = 0usize;
        for t in parts {
            if t.shape.n != n || t.shape.h != h || t.shape.w != w {
                return Err(Error::ShapeMismatch(format!(
                    "concat_channels: {} does not match {} outside the channel axis",
                    t.shape, first.shape
                )));
            }
            c_total += t.shape.c;
        }
        let out_shape = Shape::new(n, c_total, h, w);
        let plane = h * w;
        let mut data = Vec::with_capacity(out_shape.checked_numel()?);
        for b in 0..n {
            for t in parts {
                let start = b * t.shape.c * plane;
                data.extend_from_slice(&t.data[start..start + t.shape.c * plane]);
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }
}

// ---------------------------------------------------------------------------
// .nct on-disk format
// ---------------------------------------------------------------------------
//
//   bytes 0..8   magic "NCTENS01"
//   bytes 8..    UTF-8 JSON header, terminated by a single '\n':
//                {"dtype":"f32","shape":[n,c,h,w]}
//   rest         raw little-endian element payload in NCHW order

/// Magic prefix of a `.nct` tensor file.
pub const TENSOR_MAGIC: &[u8; 8] = b"NCTENS01";

const MAX_HEADER_LEN: usize = 65_536;

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorHeader {
    dtype: String,
    shape: [u64; 4],
}

/// Write a tensor in `.nct` format.
pub fn write_tensor<E: Element, W: Write>(w: &mut W, t: &Tensor<E>) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    let header = TensorHeader {
        dtype: E::DTYPE.as_str().to_string(),
        shape: t.shape().dims().map(|d| d as u64),
    };
    let mut line = serde_json::to_vec(&header).expect("header serialization cannot fail");
    line.push(b'\n');
    w.write_all(&line)?;
    let mut payload = Vec::with_capacity(t.numel() * E::DTYPE.size());
    for &v in t.data() {
        v.write_le(&mut payload);
    }
    w.write_all(&payload)?;
    Ok(())
}

pub fn write_tensor_file<E: Element>(path: impl AsRef<Path>, t: &Tensor<E>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t)?;
    f.flush()?;
    Ok(())
}

/// A tensor of either supported dtype, as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyTensor::F32(_) => Dtype::F32,
            AnyTensor::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> Shape {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Unwrap as f32, erroring on dtype mismatch (no silent conversion).
    pub fn expect_f32(self) -> Result<Tensor<f32>> {
        match self {
            AnyTensor::F32(t) => Ok(t),
            AnyTensor::F64(_) => Err(Error::ShapeMismatch(
                "expected an f32 tensor, file holds f64".into(),
            )),
        }
    }

    /// Unwrap as f64, erroring on dtype mismatch (no silent conversion).
    pub fn expect_f64(self) -> Result<Tensor<f64>> {
        match self {
            AnyTensor::F64(t) => Ok(t),
            AnyTensor::F32(_) => Err(Error::ShapeMismatch(
                "expected an f64 tensor, file holds f32".into(),
            )),
        }
    }
}

/// Read the '\n'-terminated JSON header line that follows an 8-byte magic.
/// Returns the raw line (without the terminator). `base` is the byte offset
/// of the line start, used for error reporting.
pub(crate) fn read_header_line<R: Read>(r: &mut R, base: u64) -> Result<Vec<u8>> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match r.read(&mut byte)? {
            0 => {
                return Err(Error::Format {
                    offset: base + line.len() as u64,
                    msg: "unterminated header line (expected '\\n')".into(),
                })
            }
            _ => {
                if byte[0] == b'\n' {
                    return Ok(line);
                }
                line.push(byte[0]);
                if line.len() > MAX_HEADER_LEN {
                    return Err(Error::Format {
                        offset: base,
                        msg: format!("header line exceeds {MAX_HEADER_LEN} bytes"),
                    });
                }
            }
        }
    }
}

pub(crate) fn check_magic<R: Read>(r: &mut R, expect: &[u8; 8], what: &str) -> Result<()> {
    let mut magic = [0u8; 8];
    let mut got = 0usize;
    while got < 8 {
        let n = r.read(&mut magic[got..])?;
        if n == 0 {
            return Err(Error::Format {
                offset: got as u64,
                msg: format!("truncated {what} magic (file shorter than 8 bytes)"),
            });
        }
        got += n;
    }
    if &magic != expect {
        return Err(Error::Format {
            offset: 0,
            msg: format!(
                "bad {what} magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(expect),
                String::from_utf8_lossy(&magic)
            ),
        });
    }
    Ok(())
}

/// Read a `.nct` tensor of either dtype.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<AnyTensor> {
    check_magic(r, TENSOR_MAGIC, "tensor")?;
    let line = read_header_line(r, 8)?;
    let header: TensorHeader = serde_json::from_slice(&line).map_err(|e| Error::Format {
        offset: 8,
        msg: format!("invalid header JSON: {e}"),
    })?;
    let payload_base = 8 + line.len() as u64 + 1;
    let dtype = Dtype::parse(&header.dtype).ok_or_else(|| Error::Format {
        offset: 8,
        msg: format!("unknown dtype {:?} (expected \"f32\" or \"f64\")", header.dtype),
    })?;
    let dims = header.shape;
    if dims.iter().any(|&d| d == 0 || d > u32::MAX as u64) {
        return Err(Error::Format {
            offset: 8,
            msg: format!("invalid shape {dims:?}: dims must be in 1..=2^32"),
        });
    }
    let numel = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n.checked_mul(dtype.size() as u64).is_some())
        .ok_or_else(|| Error::Format {
            offset: 8,
            msg: format!("shape {dims:?} overflows the addressable payload size"),
        })? as usize;
    let expected_bytes = numel * dtype.size();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != expected_bytes {
        return Err(Error::Format {
            offset: payload_base + payload.len().min(expected_bytes) as u64,
            msg: format!(
                "payload length mismatch: header implies {expected_bytes} bytes, found {}",
                payload.len()
            ),
        });
    }
    let shape = Shape::new(
        dims[0] as usize,
        dims[1] as usize,
        dims[2] as usize,
        dims[3] as usize,
    );
    fn decode<E: Element>(shape: Shape, payload: &[u8]) -> Tensor<E> {
        let data: Vec<E> = payload
            .chunks_exact(E::DTYPE.size())
            .map(E::read_le)
            .collect();
        Tensor::from_vec(shape, data).expect("length verified above")
    }
    Ok(match dtype {
        Dtype::F32 => AnyTensor::F32(decode::<f32>(shape, &payload)),
        Dtype::F64 => AnyTensor::F64(decode::<f64>(shape, &payload)),
    })
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut f)
}
