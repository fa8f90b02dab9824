//! Dense f64 tensor with optional reverse-mode autodiff tracking.
//!
//! A [`Tensor`] is a plain row-major value; gradients come from running ops
//! through a [`Tape`](tape::Tape). A tensor whose `node` is set participates
//! in the tape it was produced on; detached tensors are constants.

pub mod gradcheck;
pub mod ops;
pub mod tape;

use crate::error::{Error, Result};

/// Serialization magic for a single tensor blob.
pub const TENSOR_MAGIC: &[u8; 4] = b"SPMB";
/// Current tensor blob format version.
pub const TENSOR_FORMAT_VERSION: u32 = 1;

const MAX_RANK: u32 = 8;
const MAX_ELEMS: u64 = 1 << 26;

/// Dense N-dimensional array of f64, row-major.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    node: Option<usize>,
}

/// Value equality: shape and data only. The tape node is bookkeeping and two
/// tensors holding the same numbers are equal regardless of where they came
/// from.
impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    /// Build a tensor from a shape and flat row-major data.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            node: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            node: None,
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Tape handle, if this tensor is tracked.
    pub fn node(&self) -> Option<usize> {
        self.node
    }

    pub(crate) fn set_node(&mut self, node: Option<usize>) {
        self.node = node;
    }

    /// Copy of this tensor with autodiff tracking removed.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Usage(format!(
                "item() on tensor with {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    /// Reinterpret with a new shape of identical element count. Tracking is
    /// preserved: reshape is a no-op on the flat data.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dim(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            node: self.node,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Encode as a little-endian blob: magic, version, rank, extents, data.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.shape.len() * 8 + self.data.len() * 8);
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &e in &self.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decode a tensor blob from the front of `bytes`.
    ///
    /// Returns the tensor and the number of bytes consumed. All extents are
    /// validated against the available byte count before any allocation, so
    /// arbitrary (hostile) input cannot trigger oversized allocations.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Tensor, usize)> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Data(format!(
                    "tensor blob truncated at byte {} (want {} more)",
                    *pos, n
                )));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };

        let magic = take(&mut pos, 4)?;
        if magic != TENSOR_MAGIC {
            return Err(Error::Data("bad tensor magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != TENSOR_FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported tensor format v{version}")));
        }
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if rank > MAX_RANK {
            return Err(Error::Data(format!("tensor rank {rank} exceeds limit")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let e = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            numel = numel
                .checked_mul(e)
                .filter(|&n| n <= MAX_ELEMS)
                .ok_or_else(|| Error::Data("tensor extent product overflows limit".into()))?;
            shape.push(e as usize);
        }
        let data_bytes = (numel as usize)
            .checked_mul(8)
            .ok_or_else(|| Error::Data("tensor size overflow".into()))?;
        if pos + data_bytes > bytes.len() {
            return Err(Error::Data(format!(
                "tensor blob truncated: want {} data bytes, have {}",
                data_bytes,
                bytes.len() - pos
            )));
        }
        let mut data = Vec::with_capacity(numel as usize);
        for chunk in bytes[pos..pos + data_bytes].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        pos += data_bytes;
        Ok((
            Tensor {
                shape,
                data,
                node: None,
            },
            pos,
        ))
    }
}

/// Row-major flat index helpers for NCHW tensors.
#[inline]
pub fn nchw_index(c_dim: usize, h_dim: usize, w_dim: usize, n: usize, c: usize, h: usize, w: usize) -> usize {
    ((n * c_dim + c) * h_dim + h) * w_dim + w
}
