use super::{Layer, LayerParams, Mode, ParamKind};
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic at every training step.
pub const BN_MOMENTUM: f64 = 0.9;

/// Running statistics, excluded from parameter counts.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
        }
    }
}

/// What the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct BnCache {
    shape: Shape4,
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
}

fn check(x: &Tensor, p: &LayerParams, state: &BnState) -> Result<Shape4> {
    let s = x.dims4()?;
    let ok = p.weights.shape() == [s.c]
        && p.bias.as_ref().is_some_and(|b| b.shape() == [s.c])
        && state.running_mean.shape() == [s.c]
        && state.running_var.shape() == [s.c];
    if !ok {
        return Err(Error::shape(format!(
            "batchnorm parameters do not match {} channels",
            s.c
        )));
    }
    Ok(s)
}

/// Per-channel normalization over `(N, H, W)`.
///
/// Training mode normalizes with biased batch statistics and folds them into
/// the running estimates; inference mode uses the running estimates.
pub fn batchnorm2d_forward(x: &Tensor, p: &LayerParams, state: &mut BnState, mode: Mode) -> Result<(Tensor, BnCache)> {
    let s = check(x, p, state)?;
    let hw = s.plane();
    let count = (s.n * hw) as f64;
    let data = x.data();
    let channel = |c: usize| (0..s.n).flat_map(move |n| (n * s.c + c) * hw..(n * s.c + c + 1) * hw);

    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => (0..s.c)
            .map(|c| {
                let mu = channel(c).map(|i| data[i]).sum::<f64>() / count;
                let var = channel(c).map(|i| (data[i] - mu).powi(2)).sum::<f64>() / count;
                (mu, var)
            })
            .unzip(),
        Mode::Infer => (
            state.running_mean.data().to_vec(),
            state.running_var.data().to_vec(),
        ),
    };
    if mode == Mode::Train {
        let rm = state.running_mean.data_mut();
        for (r, m) in rm.iter_mut().zip(&mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        let rv = state.running_var.data_mut();
        for (r, v) in rv.iter_mut().zip(&var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
        }
    }

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let gamma = p.weights.data();
    let beta = p.bias.as_ref().map(Tensor::data).unwrap_or_default();
    let mut normalized = vec![0.0; data.len()];
    let mut out = vec![0.0; data.len()];
    for n in 0..s.n {
        for c in 0..s.c {
            let range = (n * s.c + c) * hw..(n * s.c + c + 1) * hw;
            for i in range {
                let xh = (data[i] - mean[c]) * inv_std[c];
                normalized[i] = xh;
                out[i] = gamma[c] * xh + beta[c];
            }
        }
    }
    let y = Tensor::raw(x.shape().to_vec(), out);
    y.ensure_finite("batchnorm")?;
    Ok((
        y,
        BnCache {
            shape: s,
            normalized,
            inv_std,
            mode,
        },
    ))
}

pub fn batchnorm2d_backward(cache: &BnCache, p: &mut LayerParams, upstream: &Tensor) -> Result<Tensor> {
    let s = cache.shape;
    if upstream.shape() != s.to_vec() {
        return Err(Error::shape(format!("batchnorm upstream {:?}", upstream.shape())));
    }
    let hw = s.plane();
    let count = (s.n * hw) as f64;
    let up = upstream.data();
    let xh = &cache.normalized;
    let mut sum_g = vec![0.0; s.c];
    let mut sum_gx = vec![0.0; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            for i in (n * s.c + c) * hw..(n * s.c + c + 1) * hw {
                sum_g[c] += up[i];
                sum_gx[c] += up[i] * xh[i];
            }
        }
    }
    for (g, v) in p.grad_weights.data_mut().iter_mut().zip(&sum_gx) {
        *g += v;
    }
    if let Some(gb) = p.grad_bias.as_mut() {
        for (g, v) in gb.data_mut().iter_mut().zip(&sum_g) {
            *g += v;
        }
    }
    let gamma = p.weights.data();
    let mut dx = vec![0.0; up.len()];
    for n in 0..s.n {
        for c in 0..s.c {
            let scale = gamma[c] * cache.inv_std[c];
            for i in (n * s.c + c) * hw..(n * s.c + c + 1) * hw {
                dx[i] = match cache.mode {
                    Mode::Train => scale * (up[i] - sum_g[c] / count - xh[i] * sum_gx[c] / count),
                    Mode::Infer => scale * up[i],
                };
            }
        }
    }
    Ok(Tensor::raw(s.to_vec(), dx))
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub params: LayerParams,
    pub state: BnState,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    /// `gamma = 1`, `beta = 0`, running mean 0 and variance 1.
    pub fn new(channels: usize) -> Self {
        let mut params = LayerParams::new(Tensor::ones(&[channels]), Some(Tensor::zeros(&[channels])));
        params.kind = ParamKind::Norm;
        Self {
            params,
            state: BnState::new(channels),
            cache: None,
        }
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (y, cache) = batchnorm2d_forward(x, &self.params, &mut self.state, mode)?;
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or(Error::StaleCache)?;
        batchnorm2d_backward(&cache, &mut self.params, upstream)
    }

    fn params(&self) -> Vec<&LayerParams> {
        vec![&self.params]
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParams> {
        vec![&mut self.params]
    }
}
