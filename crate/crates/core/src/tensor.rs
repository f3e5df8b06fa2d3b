//! Dense tensors, the two numeric profiles, and the on-disk container.
//!
//! A [`Tensor`] is a flat row-major buffer plus a shape. The same code path
//! serves both profiles: `Tensor<f64>` for oracle and gradient work,
//! `Tensor<f32>` for training speed. Gradients live in an optional
//! same-shape buffer on the tensor itself; the tape mirrors this layout for
//! intermediate nodes.
//!
//! The binary container (`.eqt`) is: magic `EQTS`, version u16, dtype u8,
//! rank u8, extents as u64 little-endian, then raw little-endian values.

use std::fmt;
use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"EQTS";
pub const CONTAINER_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
    I32 = 3,
}

impl Dtype {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            3 => Ok(Dtype::I32),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

/// Scalar type usable by the engine. Implemented for f32 and f64 only.
pub trait Real: num_traits::Float + fmt::Debug + fmt::Display + Send + Sync + 'static {
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn byte_width() -> usize;
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
    fn byte_width() -> usize {
        4
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
    fn byte_width() -> usize {
        8
    }
}

/// Dense n-dimensional array with optional gradient tracking.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Real> {
    shape: Vec<usize>,
    data: Vec<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidArgument(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor_new",
                detail: format!("shape {shape:?} implies {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_f64_slice(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| F::from_f64(v)).collect())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        if self.grad.is_none() {
            self.grad = Some(vec![F::zero(); self.data.len()]);
        }
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Accumulate into the gradient buffer (sum semantics).
    pub fn accumulate_grad(&mut self, delta: &[F]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self
            .grad
            .get_or_insert_with(|| vec![F::zero(); self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = *g + *d;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            for v in g.iter_mut() {
                *v = F::zero();
            }
        }
    }

    /// Cast between profiles through f64. Exact for f64→f64 and f32→f64.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn write_container<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.data.len() * F::byte_width());
        buf.extend_from_slice(CONTAINER_MAGIC);
        buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        buf.push(F::DTYPE.code());
        buf.push(self.shape.len() as u8);
        for &e in &self.shape {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_container<R: Read>(r: &mut R) -> Result<Self> {
        let (dtype, shape, payload) = read_container_raw(r)?;
        let numel: usize = shape.iter().product();
        let data: Vec<F> = match dtype {
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|c| F::from_f64(f32::read_le(c) as f64))
                .collect(),
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|c| F::from_f64(f64::read_le(c)))
                .collect(),
            Dtype::I32 => {
                return Err(Error::Format(
                    "container holds integer data, not a float tensor".into(),
                ))
            }
        };
        if data.len() != numel {
            return Err(Error::Format("container payload truncated".into()));
        }
        Tensor::new(shape, data)
    }
}

fn read_header<R: Read>(r: &mut R) -> Result<(Dtype, Vec<usize>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CONTAINER_MAGIC {
        return Err(Error::Format("bad container magic".into()));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v)?;
    let version = u16::from_le_bytes(v);
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version}"
        )));
    }
    let mut meta = [0u8; 2];
    r.read_exact(&mut meta)?;
    let dtype = Dtype::from_code(meta[0])?;
    let rank = meta[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut e = [0u8; 8];
        r.read_exact(&mut e)?;
        shape.push(u64::from_le_bytes(e) as usize);
    }
    Ok((dtype, shape))
}

fn read_container_raw<R: Read>(r: &mut R) -> Result<(Dtype, Vec<usize>, Vec<u8>)> {
    let (dtype, shape) = read_header(r)?;
    let numel: usize = shape.iter().product();
    let width = match dtype {
        Dtype::F32 | Dtype::I32 => 4,
        Dtype::F64 => 8,
    };
    let mut payload = vec![0u8; numel * width];
    r.read_exact(&mut payload)?;
    Ok((dtype, shape, payload))
}

/// Dense map of integer category ids (labels). Stored as dtype I32.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    pub shape: Vec<usize>,
    pub data: Vec<i32>,
}

impl Labels {
    pub fn new(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "labels_new",
                detail: format!("shape {shape:?} implies {numel} values, got {}", data.len()),
            });
        }
        Ok(Labels { shape, data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn write_container<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.data.len() * 4);
        buf.extend_from_slice(CONTAINER_MAGIC);
        buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        buf.push(Dtype::I32.code());
        buf.push(self.shape.len() as u8);
        for &e in &self.shape {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_container<R: Read>(r: &mut R) -> Result<Self> {
        let (dtype, shape, payload) = read_container_raw(r)?;
        if dtype != Dtype::I32 {
            return Err(Error::Format("container does not hold label data".into()));
        }
        let data: Vec<i32> = payload
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Labels::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn container_round_trip_is_byte_identical() {
        let t = Tensor::<f64>::from_f64_slice(vec![2, 3], &[1.0, -2.5, 3.0, 0.0, 5.5, -6.25])
            .unwrap();
        let mut bytes = Vec::new();
        t.write_container(&mut bytes).unwrap();
        let back = Tensor::<f64>::read_container(&mut bytes.as_slice()).unwrap();
        assert_eq!(t, back);
        let mut again = Vec::new();
        back.write_container(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn container_cross_profile_read_casts() {
        let t = Tensor::<f32>::from_f64_slice(vec![3], &[1.5, 2.5, -3.0]).unwrap();
        let mut bytes = Vec::new();
        t.write_container(&mut bytes).unwrap();
        let as_f64 = Tensor::<f64>::read_container(&mut bytes.as_slice()).unwrap();
        assert_eq!(as_f64.data(), &[1.5, 2.5, -3.0]);
    }

    #[test]
    fn labels_round_trip() {
        let l = Labels::new(vec![2, 2], vec![0, 1, 255, 3]).unwrap();
        let mut bytes = Vec::new();
        l.write_container(&mut bytes).unwrap();
        let back = Labels::read_container(&mut bytes.as_slice()).unwrap();
        assert_eq!(l, back);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut bytes = Vec::new();
        Tensor::<f64>::scalar(1.0)
            .write_container(&mut bytes)
            .unwrap();
        bytes[0] = b'X';
        assert!(Tensor::<f64>::read_container(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn grad_accumulates_across_calls() {
        let mut t = Tensor::<f64>::zeros(vec![2]).with_grad();
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[0.5, 0.5]);
        assert_eq!(t.grad.as_ref().unwrap(), &vec![1.5, 2.5]);
        t.zero_grad();
        assert_eq!(t.grad.as_ref().unwrap(), &vec![0.0, 0.0]);
    }
}
