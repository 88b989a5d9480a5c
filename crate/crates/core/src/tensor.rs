//! Dense row-major tensors.
//!
//! A [`Tensor`] is a shape plus a flat buffer. All layout operations
//! (`reshape`, `permute`, `pad2d`, `crop2d`, row scatter/gather) are plain
//! data movement; the reverse-mode machinery in [`crate::autodiff`] builds on
//! them.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element type of a tensor. Implemented for `f32` (training) and `f64`
/// (gradient checking).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        out[i] = out[i + 1] * shape[i + 1];
    }
    out
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {:?} holds {} elements but buffer has {}",
                    shape,
                    numel(&shape),
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel(shape)],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Tensor::new(shape.to_vec(), values.iter().map(|&v| T::of(v)).collect())
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        self.clone().into_shape(shape)
    }

    /// Reinterprets the buffer under a new shape without moving data.
    pub fn into_shape(self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(
                "permute",
                format!("{:?} is not a permutation of the axes of {:?}", axes, self.shape),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = strides(&self.shape);
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        if self.data.is_empty() {
            return Tensor::new(out_shape, out);
        }
        // The innermost axis is copied in a tight loop; outer axes are walked
        // with an odometer over the remaining indices.
        let inner = *out_shape.last().unwrap_or(&1);
        let inner_stride = *src_strides.last().unwrap_or(&1);
        let outer_rank = rank.saturating_sub(1);
        let mut idx = vec![0usize; outer_rank];
        let mut base = 0usize;
        loop {
            if inner_stride == 1 {
                out.extend_from_slice(&self.data[base..base + inner]);
            } else {
                out.extend((0..inner).map(|j| self.data[base + j * inner_stride]));
            }
            let mut axis = outer_rank;
            loop {
                if axis == 0 {
                    return Tensor::new(out_shape, out);
                }
                axis -= 1;
                idx[axis] += 1;
                base += src_strides[axis];
                if idx[axis] < out_shape[axis] {
                    break;
                }
                base -= src_strides[axis] * out_shape[axis];
                idx[axis] = 0;
            }
        }
    }

    /// Zero-pads a `[rows, cols, channels]` tensor at the bottom and right.
    pub fn pad2d(&self, extra_rows: usize, extra_cols: usize) -> Result<Self> {
        let (rows, cols, ch) = self.dims3("pad2d")?;
        let new_cols = cols + extra_cols;
        let mut out = vec![T::zero(); (rows + extra_rows) * new_cols * ch];
        for r in 0..rows {
            let src = &self.data[r * cols * ch..(r + 1) * cols * ch];
            out[r * new_cols * ch..r * new_cols * ch + cols * ch].copy_from_slice(src);
        }
        Tensor::new(vec![rows + extra_rows, new_cols, ch], out)
    }

    /// Keeps the top-left `rows × cols` window of a `[R, C, channels]` tensor.
    pub fn crop2d(&self, rows: usize, cols: usize) -> Result<Self> {
        let (r0, c0, ch) = self.dims3("crop2d")?;
        if rows > r0 || cols > c0 {
            return Err(Error::shape(
                "crop2d",
                format!("cannot crop {:?} to {}x{}", self.shape, rows, cols),
            ));
        }
        let mut out = Vec::with_capacity(rows * cols * ch);
        for r in 0..rows {
            out.extend_from_slice(&self.data[r * c0 * ch..r * c0 * ch + cols * ch]);
        }
        Tensor::new(vec![rows, cols, ch], out)
    }

    /// `out[index[i]] = self[i]` for rows of a matrix; other rows are zero.
    pub fn scatter_rows(&self, index: &[usize], rows: usize) -> Result<Self> {
        let (n, c) = self.dims2("scatter_rows")?;
        if index.len() != n || index.iter().any(|&i| i >= rows) {
            return Err(Error::shape(
                "scatter_rows",
                format!("index of length {} invalid for {} rows into {}", index.len(), n, rows),
            ));
        }
        let mut out = vec![T::zero(); rows * c];
        for (i, &dst) in index.iter().enumerate() {
            out[dst * c..(dst + 1) * c].copy_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Tensor::new(vec![rows, c], out)
    }

    /// `out[i] = self[index[i]]` for rows of a matrix.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Self> {
        let (r, c) = self.dims2("gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {} out of range for {:?}", bad, self.shape),
            ));
        }
        let mut out = Vec::with_capacity(index.len() * c);
        for &src in index {
            out.extend_from_slice(&self.data[src * c..(src + 1) * c]);
        }
        Tensor::new(vec![index.len(), c], out)
    }

    /// Plain matrix product `[m,k]·[k,n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::shape(op, format!("expected a matrix, got {:?}", self.shape))),
        }
    }

    pub(crate) fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::shape(
                op,
                format!("expected a [rows, cols, channels] grid, got {:?}", self.shape),
            )),
        }
    }
}

/// `out += a·b` with `a: [m,k]`, `b: [k,n]`.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out += aᵀ·b` with `a: [m,k]`, `b: [m,n]`, `out: [k,n]`.
pub(crate) fn matmul_tn_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out += a·bᵀ` with `a: [m,n]`, `b: [k,n]`, `out: [m,k]`.
pub(crate) fn matmul_nt_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot = arow
                .iter()
                .zip(brow)
                .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
            out[i * k + p] = out[i * k + p] + dot;
        }
    }
}
