//! Dense tensors in NCHW layout with a small binary on-disk format.
//!
//! Layout is row-major over (batch, channel, row, column): the flat index of
//! `(b, c, y, x)` is `((b*C + c)*H + y)*W + x`. Every operation that walks a
//! tensor does so in ascending flat order, and reductions accumulate in that
//! serial order, so results are reproducible across runs and platforms.
//!
//! Public operations return new tensors; a tensor handed out by this module
//! is never mutated afterwards.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use num_traits::Float;

use crate::error::{Error, Result};

/// On-disk element type tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u32 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Element types a [`Tensor`] can hold.
pub trait Scalar: Float + Copy + fmt::Debug + fmt::Display + Send + Sync + 'static {
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    /// Size of one element in the on-disk encoding.
    const BYTE_WIDTH: usize;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const BYTE_WIDTH: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const BYTE_WIDTH: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

/// Dimensions of a tensor, batch-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    /// Total number of elements.
    pub fn volume(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    /// Elements in one spatial plane.
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Flat index of `(b, c, y, x)`.
    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(b < self.batch && c < self.channels && y < self.height && x < self.width);
        ((b * self.channels + c) * self.height + y) * self.width + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.batch, self.channels, self.height, self.width
        )
    }
}

/// Dense NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Scalar> {
    shape: Shape,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![E::zero(); shape.volume()],
        }
    }

    pub fn filled(shape: Shape, value: E) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.volume()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<E>) -> Result<Self> {
        if data.len() != shape.volume() {
            return Err(Error::LengthMismatch {
                expected: shape.volume(),
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor by evaluating `f` at every coordinate in layout order.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> E) -> Self {
        let mut data = Vec::with_capacity(shape.volume());
        for b in 0..shape.batch {
            for c in 0..shape.channels {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> E {
        self.data[self.shape.index(b, c, y, x)]
    }

    #[inline]
    pub(crate) fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: E) {
        let i = self.shape.index(b, c, y, x);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(E, E) -> E) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context: "zip_with",
                expected: self.shape.to_string(),
                got: other.shape.to_string(),
            });
        }
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn scale(&self, k: E) -> Self {
        self.map(|v| v * k)
    }

    /// Sum of all elements, accumulated in ascending flat order.
    pub fn sum(&self) -> E {
        let mut acc = E::zero();
        for &v in &self.data {
            acc = acc + v;
        }
        acc
    }

    pub fn mean(&self) -> E {
        self.sum() / E::from_f64(self.shape.volume() as f64)
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context: "max_abs_diff",
                expected: self.shape.to_string(),
                got: other.shape.to_string(),
            });
        }
        let mut worst = 0.0f64;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            let d = (a.to_f64() - b.to_f64()).abs();
            if d > worst {
                worst = d;
            }
        }
        Ok(worst)
    }

    /// True when every element compares exactly equal.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(&a, &b)| a == b)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| Float::is_finite(*v))
    }

    /// Lossy element cast between supported dtypes.
    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| F::from_f64(v.to_f64())).collect(),
        }
    }

    /// Writes the tensor to `path` in the PRT1 format.
    ///
    /// PRT1 is: magic `PRT1\0\0\0\0`, then five little-endian u32 fields
    /// (dtype code, batch, channels, height, width), then the raw
    /// little-endian element bytes in layout order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::with_capacity(28 + self.data.len() * E::BYTE_WIDTH);
        buf.extend_from_slice(MAGIC);
        for field in [
            E::DTYPE.code(),
            self.shape.batch as u32,
            self.shape.channels as u32,
            self.shape.height as u32,
            self.shape.width as u32,
        ] {
            buf.extend_from_slice(&field.to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut buf);
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    /// Reads a PRT1 file written with the same element type.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        match load_any(path)? {
            DynTensor::F32(t) if E::DTYPE == Dtype::F32 => Ok(t.cast()),
            DynTensor::F64(t) if E::DTYPE == Dtype::F64 => Ok(t.cast()),
            DynTensor::F32(_) => Err(Error::DtypeMismatch {
                expected: E::DTYPE.name(),
                found: "f32",
            }),
            DynTensor::F64(_) => Err(Error::DtypeMismatch {
                expected: E::DTYPE.name(),
                found: "f64",
            }),
        }
    }
}

const MAGIC: &[u8; 8] = b"PRT1\0\0\0\0";

/// A tensor of either supported dtype, as found on disk.
#[derive(Debug, Clone)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            DynTensor::F32(_) => Dtype::F32,
            DynTensor::F64(_) => Dtype::F64,
        }
    }
}

/// Reads a PRT1 file of either dtype.
pub fn load_any(path: impl AsRef<Path>) -> Result<DynTensor> {
    let bytes = fs::read(&path)?;
    if bytes.len() < 28 {
        return Err(Error::BadFileFormat(format!(
            "file has {} bytes, header needs 28",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::BadFileFormat("bad magic".into()));
    }
    let mut fields = [0u32; 5];
    for (i, field) in fields.iter_mut().enumerate() {
        let start = 8 + 4 * i;
        *field = u32::from_le_bytes(bytes[start..start + 4].try_into().unwrap());
    }
    let dtype = Dtype::from_code(fields[0])
        .ok_or_else(|| Error::BadFileFormat(format!("unknown dtype code {}", fields[0])))?;
    let shape = Shape::new(
        fields[1] as usize,
        fields[2] as usize,
        fields[3] as usize,
        fields[4] as usize,
    );
    let payload = &bytes[28..];

    fn decode<E: Scalar>(shape: Shape, payload: &[u8]) -> Result<Tensor<E>> {
        let expected = shape.volume() * E::BYTE_WIDTH;
        if payload.len() != expected {
            return Err(Error::BadFileFormat(format!(
                "payload has {} bytes, shape {} needs {}",
                payload.len(),
                shape,
                expected
            )));
        }
        let data = payload
            .chunks_exact(E::BYTE_WIDTH)
            .map(E::read_le)
            .collect();
        Tensor::from_vec(shape, data)
    }

    match dtype {
        Dtype::F32 => Ok(DynTensor::F32(decode(shape, payload)?)),
        Dtype::F64 => Ok(DynTensor::F64(decode(shape, payload)?)),
    }
}

/// Integer label image, one label per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        LabelMap {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::LengthMismatch {
                expected: height * width,
                got: data.len(),
            });
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}

/// Per-pixel argmax over the channel axis of batch item `b`; ties go to the
/// lowest channel index.
pub fn argmax_channels<E: Scalar>(t: &Tensor<E>, b: usize) -> LabelMap {
    let s = t.shape();
    assert!(b < s.batch, "batch index {b} out of range for {s}");
    assert!(s.channels <= 256, "more channels than label values");
    let mut out = LabelMap::zeros(s.height, s.width);
    for y in 0..s.height {
        for x in 0..s.width {
            let mut best_c = 0usize;
            let mut best_v = t.get(b, 0, y, x);
            for c in 1..s.channels {
                let v = t.get(b, c, y, x);
                if v > best_v {
                    best_v = v;
                    best_c = c;
                }
            }
            out.set(y, x, best_c as u8);
        }
    }
    out
}

/// Thresholds channel 0 of batch item `b` into a binary label map
/// (1 where the value exceeds `threshold`).
pub fn threshold_labels<E: Scalar>(t: &Tensor<E>, b: usize, threshold: E) -> LabelMap {
    let s = t.shape();
    assert!(b < s.batch, "batch index {b} out of range for {s}");
    let mut out = LabelMap::zeros(s.height, s.width);
    for y in 0..s.height {
        for x in 0..s.width {
            if t.get(b, 0, y, x) > threshold {
                out.set(y, x, 1);
            }
        }
    }
    out
}
