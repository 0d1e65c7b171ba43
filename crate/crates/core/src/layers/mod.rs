//! Forward and backward kernels for the convolutional building blocks.
//!
//! Each kernel comes in two flavours: a free function that takes its inputs
//! explicitly (`conv2d_forward`, `conv2d_backward`, ...) and a small stateful
//! layer that caches what its backward pass needs. Backward passes add into
//! the gradient buffers of [`LayerParams`]; they never overwrite them.

mod batchnorm;
mod conv;
mod dense;
mod loss;
mod pool;

pub use batchnorm::{batchnorm2d_backward, batchnorm2d_forward, BatchNorm2d, BnCache, BnState, BN_EPS, BN_MOMENTUM};
pub use conv::{conv2d_backward, conv2d_forward, Conv2d, ConvSpec, Padding};
pub use dense::{dense_backward, dense_forward, Dense};
pub use loss::softmax_xent;
pub use pool::{
    channelwise_pool, channelwise_pool_backward, global_avg_pool, global_avg_pool_backward,
    global_max_pool, global_max_pool_backward, maxpool2d, maxpool2d_backward, GlobalAvgPool, MaxPool2d,
};

use crate::activations::{act_backward, act_forward, ActivationKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// How a parameter tensor is laid out, which decides its initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// `(out, in, kh, kw)` convolution kernel.
    Conv,
    /// `(in, out)` fully connected weights.
    Dense,
    /// `(k,)` taps of a 1-D convolution.
    Kernel1d,
    /// Per-channel normalization scale and shift.
    Norm,
}

/// Learnable weights and bias of one layer with matching gradient buffers.
#[derive(Debug, Clone)]
pub struct LayerParams {
    /// Registry name, assigned by the model builder.
    pub name: String,
    pub kind: ParamKind,
    pub weights: Tensor,
    pub bias: Option<Tensor>,
    pub grad_weights: Tensor,
    pub grad_bias: Option<Tensor>,
}

impl LayerParams {
    pub fn new(weights: Tensor, bias: Option<Tensor>) -> Self {
        let grad_weights = Tensor::zeros(weights.shape());
        let grad_bias = bias.as_ref().map(|b| Tensor::zeros(b.shape()));
        let kind = match weights.rank() {
            4 => ParamKind::Conv,
            2 => ParamKind::Dense,
            _ => ParamKind::Kernel1d,
        };
        Self {
            name: String::new(),
            kind,
            weights,
            bias,
            grad_weights,
            grad_bias,
        }
    }

    /// All-zero parameters.
    pub fn zeros(weight_shape: &[usize], bias_len: Option<usize>) -> Self {
        Self::new(Tensor::zeros(weight_shape), bias_len.map(|n| Tensor::zeros(&[n])))
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Inputs feeding one output unit, as used by fan-in initialization.
    pub fn fan_in(&self) -> usize {
        let shape = self.weights.shape();
        match self.kind {
            ParamKind::Conv => shape[1..].iter().product(),
            ParamKind::Dense => shape[0],
            ParamKind::Kernel1d => shape.iter().product(),
            ParamKind::Norm => 1,
        }
    }

    /// Scalar count of weights plus bias.
    pub fn numel(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    pub fn zero_grads(&mut self) {
        self.grad_weights.data_mut().fill(0.0);
        if let Some(g) = self.grad_bias.as_mut() {
            g.data_mut().fill(0.0);
        }
    }

    pub(crate) fn bias_slice(&self) -> Option<&[f64]> {
        self.bias.as_ref().map(Tensor::data)
    }
}

/// A differentiable unit with an internal forward cache.
pub trait Layer {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor>;

    /// Consumes the cache left by the last forward call.
    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor>;

    fn params(&self) -> Vec<&LayerParams> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParams> {
        Vec::new()
    }
}

impl<L: Layer + ?Sized> Layer for Box<L> {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        (**self).forward(x, mode)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        (**self).backward(upstream)
    }

    fn params(&self) -> Vec<&LayerParams> {
        (**self).params()
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParams> {
        (**self).params_mut()
    }
}

impl<L: Layer + ?Sized> Layer for &mut L {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        (**self).forward(x, mode)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        (**self).backward(upstream)
    }

    fn params(&self) -> Vec<&LayerParams> {
        (**self).params()
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParams> {
        (**self).params_mut()
    }
}

/// Pointwise activation layer.
#[derive(Debug, Clone)]
pub struct Activation {
    pub kind: ActivationKind,
    cache: Option<Tensor>,
}

impl Activation {
    pub fn new(kind: ActivationKind) -> Self {
        Self { kind, cache: None }
    }
}

impl Layer for Activation {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let y = act_forward(self.kind, x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let x = self.cache.take().ok_or(Error::StaleCache)?;
        act_backward(self.kind, &x, upstream)
    }
}

/// Collapses `(N, ...)` to `(N, rest)`.
#[derive(Debug, Clone, Default)]
pub struct Flatten {
    input_shape: Option<Vec<usize>>,
}

impl Layer for Flatten {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let n = x.shape()[0];
        let rest = x.len() / n;
        self.input_shape = Some(x.shape().to_vec());
        x.reshape(&[n, rest])
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let shape = self.input_shape.take().ok_or(Error::StaleCache)?;
        upstream.reshape(&shape)
    }
}

/// Layers applied one after another.
#[derive(Default)]
pub struct Sequential {
    pub layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new(layers: Vec<Box<dyn Layer>>) -> Self {
        Self { layers }
    }
}

impl Layer for Sequential {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, mode)?;
        }
        Ok(h)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let mut g = upstream.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    fn params(&self) -> Vec<&LayerParams> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParams> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// `c = a * b (+ c)` for row-major slices, with optional transposes.
///
/// `a` is `m x k` (or `k x m` when `ta`), `b` is `k x n` (or `n x k` when
/// `tb`), `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    c[i * n + j] += av * bv;
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_for_all_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        for ta in [false, true] {
            for tb in [false, true] {
                let mut c = vec![1.0; m * n];
                gemm(m, k, n, &a, ta, &b, tb, &mut c, true);
                let expect = naive(m, k, n, &a, ta, &b, tb);
                for (x, y) in c.iter().zip(expect) {
                    assert!((x - 1.0 - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn flatten_roundtrip() {
        let mut f = Flatten::default();
        let x = Tensor::ones(&[2, 3, 2, 2]);
        let y = f.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[2, 12]);
        assert_eq!(f.backward(&y).unwrap().shape(), &[2, 3, 2, 2]);
        assert!(matches!(f.backward(&y), Err(Error::StaleCache)));
    }
}
