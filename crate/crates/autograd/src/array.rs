//! Dense row-major `f64` arrays.

use std::fmt;

/// A dense, row-major, owned n-dimensional array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Array{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Right-aligned broadcast of two shapes, numpy style.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

impl Array {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element array.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on array of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len());
        let mut o = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of size {dim}");
            o = o * dim + ix;
        }
        o
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            numel(shape),
            self.data.len(),
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Array, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch in zip_map");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Array) {
        assert_eq!(self.shape, other.shape, "shape mismatch in add_assign");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Array) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Reorders axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Self {
        assert_eq!(axes.len(), self.shape.len(), "permute rank mismatch");
        let in_strides = strides_of(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.data.len();
        let mut data = Vec::with_capacity(n);
        if n > 0 {
            let rank = out_shape.len();
            let mut idx = vec![0usize; rank];
            let mut src = 0usize;
            for _ in 0..n {
                data.push(self.data[src]);
                for ax in (0..rank).rev() {
                    idx[ax] += 1;
                    src += src_strides[ax];
                    if idx[ax] < out_shape[ax] {
                        break;
                    }
                    src -= src_strides[ax] * out_shape[ax];
                    idx[ax] = 0;
                }
            }
        }
        Self {
            shape: out_shape,
            data,
        }
    }

    /// Broadcasts to `shape` (right-aligned, numpy rules).
    pub fn broadcast_to(&self, shape: &[usize]) -> Self {
        if self.shape == shape {
            return self.clone();
        }
        let rank = shape.len();
        assert!(self.shape.len() <= rank, "cannot broadcast {:?} to {:?}", self.shape, shape);
        let pad = rank - self.shape.len();
        let in_strides = strides_of(&self.shape);
        let mut src_strides = vec![0usize; rank];
        for i in 0..self.shape.len() {
            let d = self.shape[i];
            assert!(
                d == shape[pad + i] || d == 1,
                "cannot broadcast {:?} to {:?}",
                self.shape,
                shape
            );
            src_strides[pad + i] = if d == 1 { 0 } else { in_strides[i] };
        }
        let n = numel(shape);
        let mut data = Vec::with_capacity(n);
        if n > 0 {
            let mut idx = vec![0usize; rank];
            let mut src = 0usize;
            for _ in 0..n {
                data.push(self.data[src]);
                for ax in (0..rank).rev() {
                    idx[ax] += 1;
                    src += src_strides[ax];
                    if idx[ax] < shape[ax] {
                        break;
                    }
                    src -= src_strides[ax] * shape[ax];
                    idx[ax] = 0;
                }
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Sums a broadcast result back down to `shape`; inverse of [`Array::broadcast_to`].
    pub fn sum_to(&self, shape: &[usize]) -> Self {
        if self.shape == shape {
            return self.clone();
        }
        let rank = self.shape.len();
        let pad = rank - shape.len();
        let out_strides = strides_of(shape);
        let mut dst_strides = vec![0usize; rank];
        for i in 0..shape.len() {
            dst_strides[pad + i] = if shape[i] == 1 { 0 } else { out_strides[i] };
        }
        let mut out = vec![0.0; numel(shape)];
        let mut idx = vec![0usize; rank];
        let mut dst = 0usize;
        for &v in &self.data {
            out[dst] += v;
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                dst += dst_strides[ax];
                if idx[ax] < self.shape[ax] {
                    break;
                }
                dst -= dst_strides[ax] * self.shape[ax];
                idx[ax] = 0;
            }
        }
        Self {
            shape: shape.to_vec(),
            data: out,
        }
    }

    /// Sum over one axis, keeping it with size 1.
    pub fn sum_axis(&self, axis: usize) -> Self {
        let (outer, dim, inner) = self.split_at_axis(axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let base = (o * dim + d) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (x, y) in dst.iter_mut().zip(&self.data[base..base + inner]) {
                    *x += y;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        Self { shape, data: out }
    }

    pub(crate) fn split_at_axis(&self, axis: usize) -> (usize, usize, usize) {
        assert!(axis < self.shape.len(), "axis {axis} out of range for {:?}", self.shape);
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        (outer, self.shape[axis], inner)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Self {
        let (outer, dim, inner) = self.split_at_axis(axis);
        assert!(start + len <= dim, "narrow out of range");
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Self { shape, data }
    }

    pub fn concat(parts: &[&Array], axis: usize) -> Self {
        assert!(!parts.is_empty(), "concat of zero arrays");
        let first = parts[0];
        let (outer, _, inner) = first.split_at_axis(axis);
        let mut total = 0;
        for p in parts {
            assert_eq!(p.ndim(), first.ndim(), "concat rank mismatch");
            for (i, (&a, &b)) in p.shape.iter().zip(&first.shape).enumerate() {
                assert!(i == axis || a == b, "concat shape mismatch {:?} vs {:?}", p.shape, first.shape);
            }
            total += p.shape[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let d = p.shape[axis];
                data.extend_from_slice(&p.data[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Self { shape, data }
    }
}

/// `c[m,n] = alpha * op(a) * op(b) + beta * c` over raw slices, with `op` chosen
/// through row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_rs: isize,
    a_cs: isize,
    b: &[f64],
    b_rs: isize,
    b_cs: isize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents cover every strided access.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs,
            a_cs,
            b.as_ptr(),
            b_rs,
            b_cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
