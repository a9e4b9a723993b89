//! Dense row-major tensors and the `PTNS` binary format.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

pub const PTNS_MAGIC: &[u8; 4] = b"PTNS";
pub const PTNS_VERSION: u8 = 1;

/// Dense N-dimensional array, row-major with the last index fastest.
///
/// `shape.iter().product() == data.len()` always holds; every constructor
/// checks it.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {:?} needs {} elements, got {}",
                    shape,
                    numel,
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::one())
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> S) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::shape(
                "item",
                format!("expected one element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            debug_assert!(i < n);
            acc * n + i
        })
    }

    pub fn at(&self, index: &[usize]) -> S {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: S) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.expect_same_shape("zip_map", other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: S) -> Self {
        self.map(|v| v * factor)
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape("add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> S {
        self.sum() / S::from_usize(self.numel().max(1)).unwrap()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        self.expect_same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Bit-level equality, so `-0.0 != 0.0` and NaN payloads count.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        if self.shape != other.shape {
            return false;
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (&x, &y) in self.data.iter().zip(&other.data) {
            a.clear();
            b.clear();
            x.write_le(&mut a);
            y.write_le(&mut b);
            if a != b {
                return false;
            }
        }
        true
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| T::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub(crate) fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::shape(
                op,
                format!("expected rank {}, got shape {:?}", rank, self.shape),
            ));
        }
        Ok(())
    }

    /// Appends the `PTNS` encoding of this tensor to `out`.
    pub fn encode_ptns(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(PTNS_MAGIC);
        out.push(PTNS_VERSION);
        out.push(S::DTYPE as u8);
        out.extend_from_slice(&(self.shape.len() as u16).to_le_bytes());
        for &extent in &self.shape {
            out.extend_from_slice(&(extent as u32).to_le_bytes());
        }
        out.reserve(self.data.len() * S::DTYPE.size());
        for &v in &self.data {
            v.write_le(out);
        }
    }

    /// Decodes one `PTNS` tensor from the front of `bytes`, returning it and
    /// the number of bytes consumed. Either stored dtype is accepted and cast
    /// to `S`.
    pub fn decode_ptns(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != PTNS_MAGIC {
            return Err(Error::Format("bad tensor magic, expected PTNS".into()));
        }
        let version = cur.u8()?;
        if version != PTNS_VERSION {
            return Err(Error::Version {
                expected: PTNS_VERSION,
                found: version,
            });
        }
        let tag = cur.u8()?;
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
        let rank = cur.u16()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = cur.take(numel * dtype.size())?;
        let data = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| S::from_f64_lossy(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| S::from_f64_lossy(f64::read_le(c)))
                .collect(),
        };
        Ok((Tensor { shape, data }, cur.pos))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        self.encode_ptns(&mut out);
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (t, used) = Self::decode_ptns(&bytes)?;
        if used != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after tensor",
                bytes.len() - used
            )));
        }
        Ok(t)
    }
}

/// Little-endian reader over a byte slice with bounds-checked takes.
pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated input: wanted {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
