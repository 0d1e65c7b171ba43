//! Dense row-major tensors in double precision.
//!
//! Feature maps use the `(N, C, H, W)` layout everywhere. Operations return
//! fresh tensors; there are no views.

use std::fmt;

use crate::error::{Error, Result};

/// Canonical feature-map dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "feature map dims must be >= 1, got ({n}, {c}, {h}, {w})"
            )));
        }
        Ok(Self { n, c, h, w })
    }

    pub fn to_vec(self) -> Vec<usize> {
        vec![self.n, self.c, self.h, self.w]
    }

    pub fn numel(self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one spatial plane.
    pub fn plane(self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Mean,
    Max,
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}...", &self.data[..PREVIEW])
        }
    }
}

impl Tensor {
    /// Builds a tensor from a shape and a copy of `data`.
    ///
    /// Fails with `ShapeMismatch` if the element count disagrees with the
    /// shape and with `NonFinite` if any entry is NaN or infinite.
    pub fn new(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape.to_vec(), data.to_vec())
    }

    /// Like [`Tensor::new`] but takes ownership of the buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!("shape {shape:?} has a zero or missing axis")));
        }
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        let t = Self { shape, data };
        t.ensure_finite("tensor construction")?;
        Ok(t)
    }

    /// Internal constructor for buffers already known to match the shape.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::raw(shape.to_vec(), vec![value; numel])
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the buffer, used by optimizers and gradient checks.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Interprets the tensor as an `(N, C, H, W)` feature map.
    pub fn dims4(&self) -> Result<Shape4> {
        match self.shape[..] {
            [n, c, h, w] => Shape4::new(n, c, h, w),
            _ => Err(Error::shape(format!(
                "expected a rank-4 (N, C, H, W) tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self::raw(shape.to_vec(), self.data.clone()))
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on differing shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        ew_binary(BinaryOp::Add, self, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        ew_binary(BinaryOp::Mul, self, other)
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Walks every index of `shape` in row-major order and yields the flat
/// offset into a tensor with `other_strides`.
fn for_each_mapped(shape: &[usize], other_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let numel: usize = shape.iter().product();
    for flat in 0..numel {
        f(flat, offset);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            offset += other_strides[axis];
            if idx[axis] < shape[axis] {
                break;
            }
            offset -= other_strides[axis] * shape[axis];
            idx[axis] = 0;
        }
    }
}

/// Elementwise `a op b`.
///
/// `b` may be broadcast into `a`: ranks must agree and each axis of `b` must
/// either equal the matching axis of `a` or be 1, in which case its single
/// entry repeats along that axis. The result has `a`'s shape.
pub fn ew_binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let f = match op {
        BinaryOp::Add => |x: f64, y: f64| x + y,
        BinaryOp::Mul => |x: f64, y: f64| x * y,
    };
    let out = if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        Tensor::raw(a.shape.clone(), data)
    } else {
        let bstrides = broadcast_strides(&a.shape, &b.shape)?;
        let mut data = vec![0.0; a.len()];
        for_each_mapped(&a.shape, &bstrides, |i, j| data[i] = f(a.data[i], b.data[j]));
        Tensor::raw(a.shape.clone(), data)
    };
    out.ensure_finite("ew_binary")?;
    Ok(out)
}

/// Strides of `b` as seen from `a`'s index space, zero on broadcast axes.
pub(crate) fn broadcast_strides(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() || a.iter().zip(b).any(|(&x, &y)| y != x && y != 1) {
        return Err(Error::shape(format!("{b:?} does not broadcast to {a:?}")));
    }
    let s = strides(b);
    Ok(a
        .iter()
        .zip(b)
        .zip(s)
        .map(|((&x, &y), st)| if y == 1 && x != 1 { 0 } else { st })
        .collect())
}

/// Sums `grad` (shaped like `a`) back onto the broadcast shape `b`.
pub(crate) fn reduce_to_broadcast(grad: &Tensor, b_shape: &[usize]) -> Result<Tensor> {
    if grad.shape == b_shape {
        return Ok(grad.clone());
    }
    let bstrides = broadcast_strides(&grad.shape, b_shape)?;
    let mut out = vec![0.0; b_shape.iter().product()];
    for_each_mapped(&grad.shape, &bstrides, |i, j| out[j] += grad.data[i]);
    Ok(Tensor::raw(b_shape.to_vec(), out))
}

/// Reduces `x` over `axes`; reduced axes keep size 1.
///
/// `Mean` divides by the number of reduced elements. `Max` takes the largest
/// element.
pub fn reduce(op: ReduceOp, x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    if let Some(&axis) = axes.iter().find(|&&a| a >= rank) {
        return Err(Error::BadAxis { axis, rank });
    }
    let out_shape: Vec<usize> = x
        .shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect();
    let ostrides = broadcast_strides(&x.shape, &out_shape)?;
    let out_len: usize = out_shape.iter().product();
    let count = (x.len() / out_len) as f64;
    let data = match op {
        ReduceOp::Mean => {
            let mut acc = vec![0.0; out_len];
            for_each_mapped(&x.shape, &ostrides, |i, j| acc[j] += x.data[i]);
            acc.iter().map(|s| s / count).collect()
        }
        ReduceOp::Max => {
            let mut acc = vec![f64::NEG_INFINITY; out_len];
            for_each_mapped(&x.shape, &ostrides, |i, j| {
                if x.data[i] > acc[j] {
                    acc[j] = x.data[i];
                }
            });
            acc
        }
    };
    Ok(Tensor::raw(out_shape, data))
}
