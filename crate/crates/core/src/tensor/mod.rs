//! Dense row-major tensors and the reverse-mode tape that differentiates them.
//!
//! Activations follow the NCHW convention (batch, channel, height, width).
//! The element type is [`Real`], which is `f32` unless the crate is built
//! with the `f64` feature.

pub(crate) mod gemm;
pub mod gradcheck;
pub mod serialize;
pub(crate) mod tape;

pub use gemm::gemm;
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

#[cfg(not(feature = "f64"))]
pub type Real = f32;
#[cfg(feature = "f64")]
pub type Real = f64;

/// An N-dimensional array of [`Real`] values with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
    requires_grad: bool,
    grad: Option<Vec<Real>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<Real>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Builds a tensor whose shape is known to be consistent with `data`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<Real>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: Real) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn from_vec(data: Vec<Real>) -> Self {
        Self::from_parts(vec![data.len()], data)
    }

    pub fn ones_like(other: &Tensor) -> Self {
        Self::ones(&other.shape)
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[Real]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[Real]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<Real> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::NonScalarLoss(self.shape.clone()))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// Copies channels `start..end` out of an N×C×H×W tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        let [n, c, h, w] = dims4(self, "slice_channels")?;
        if start >= end || end > c {
            return Err(Error::InvalidShape(format!(
                "channel range {start}..{end} outside 0..{c}"
            )));
        }
        let plane = h * w;
        let width = end - start;
        let mut out = Vec::with_capacity(n * width * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            out.extend_from_slice(&self.data[base..base + width * plane]);
        }
        Ok(Tensor::from_parts(vec![n, width, h, w], out))
    }

    /// Rows `rows` of the leading axis.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        if self.shape.is_empty() {
            return Err(Error::InvalidShape("cannot select rows of a scalar".into()));
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut out = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(Error::InvalidShape(format!(
                    "row {r} out of range for leading dimension {}",
                    self.shape[0]
                )));
            }
            out.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor::new(&shape, out)
    }

    /// Bitwise equality of shape and data.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Real {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max)
    }
}

pub(crate) fn dims4(t: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    match t.shape() {
        &[n, c, h, w] => Ok([n, c, h, w]),
        other => Err(Error::InvalidShape(format!(
            "{op} expects an N×C×H×W tensor, got {other:?}"
        ))),
    }
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps every flat index of `out_shape` to the corresponding flat index of
/// an operand of shape `shape` broadcast into it.
pub(crate) fn broadcast_index_map(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    // stride of each output axis inside the operand, zero on broadcast axes
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 2], &[2]), Some(vec![2, 2]));
        assert_eq!(broadcast_shape(&[3, 1], &[1, 4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
        assert_eq!(broadcast_index_map(&[2], &[2, 2]), vec![0, 1, 0, 1]);
        assert_eq!(broadcast_index_map(&[2, 1], &[2, 3]), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn slice_channels_extracts_planes() {
        let t = Tensor::new(&[1, 3, 1, 2], (0..6).map(|v| v as Real).collect()).unwrap();
        let s = t.slice_channels(1, 3).unwrap();
        assert_eq!(s.shape(), &[1, 2, 1, 2]);
        assert_eq!(s.data(), &[2.0, 3.0, 4.0, 5.0]);
    }
}
