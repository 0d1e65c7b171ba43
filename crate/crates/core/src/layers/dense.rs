use super::{gemm, Layer, LayerParams, Mode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check(x: &Tensor, p: &LayerParams) -> Result<(usize, usize, usize)> {
    let (n, f) = match x.shape() {
        &[n, f] => (n, f),
        other => return Err(Error::shape(format!("dense input must be (N, F), got {other:?}"))),
    };
    let g = match p.weights.shape() {
        &[wf, g] if wf == f => g,
        other => {
            return Err(Error::shape(format!(
                "dense weights {other:?} do not accept {f} features"
            )))
        }
    };
    if let Some(b) = &p.bias {
        if b.len() != g {
            return Err(Error::shape(format!("dense bias has {} entries, expected {g}", b.len())));
        }
    }
    Ok((n, f, g))
}

/// `y = x W + b` for `x: (N, F)` and `W: (F, G)`.
pub fn dense_forward(x: &Tensor, p: &LayerParams) -> Result<Tensor> {
    let (n, f, g) = check(x, p)?;
    let mut out = vec![0.0; n * g];
    gemm(n, f, g, x.data(), false, p.weights.data(), false, &mut out, false);
    if let Some(b) = p.bias_slice() {
        for row in out.chunks_mut(g) {
            row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
        }
    }
    let y = Tensor::raw(vec![n, g], out);
    y.ensure_finite("dense")?;
    Ok(y)
}

pub fn dense_backward(x: &Tensor, p: &mut LayerParams, upstream: &Tensor) -> Result<Tensor> {
    let (n, f, g) = check(x, p)?;
    if upstream.shape() != [n, g] {
        return Err(Error::shape(format!(
            "dense upstream {:?}, expected {:?}",
            upstream.shape(),
            [n, g]
        )));
    }
    gemm(f, n, g, x.data(), true, upstream.data(), false, p.grad_weights.data_mut(), true);
    if let Some(gb) = p.grad_bias.as_mut() {
        for row in upstream.data().chunks(g) {
            gb.data_mut().iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
        }
    }
    let mut dx = vec![0.0; n * f];
    gemm(n, g, f, upstream.data(), false, p.weights.data(), true, &mut dx, false);
    Ok(Tensor::raw(vec![n, f], dx))
}

/// Fully connected layer.
#[derive(Debug, Clone)]
pub struct Dense {
    pub params: LayerParams,
    cache: Option<Tensor>,
}

impl Dense {
    pub fn new(in_features: usize, out_features: usize, use_bias: bool) -> Self {
        Self {
            params: LayerParams::zeros(&[in_features, out_features], use_bias.then_some(out_features)),
            cache: None,
        }
    }

    pub fn out_features(&self) -> usize {
        self.params.weights.shape()[1]
    }
}

impl Layer for Dense {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let y = dense_forward(x, &self.params)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let x = self.cache.take().ok_or(Error::StaleCache)?;
        dense_backward(&x, &mut self.params, upstream)
    }

    fn params(&self) -> Vec<&LayerParams> {
        vec![&self.params]
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParams> {
        vec![&mut self.params]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights() {
        let x = Tensor::new(&[1, 2], &[1.0, 2.0]).unwrap();
        let mut p = LayerParams::zeros(&[2, 2], Some(2));
        p.weights = Tensor::new(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(dense_forward(&x, &p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn arithmetic_example() {
        let x = Tensor::new(&[1, 2], &[1.0, 1.0]).unwrap();
        let p = LayerParams::new(
            Tensor::new(&[2, 1], &[2.0, 3.0]).unwrap(),
            Some(Tensor::new(&[1], &[-5.0]).unwrap()),
        );
        assert_eq!(dense_forward(&x, &p).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_by_hand() {
        let x = Tensor::new(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut p = LayerParams::new(
            Tensor::new(&[2, 1], &[0.5, -1.0]).unwrap(),
            Some(Tensor::zeros(&[1])),
        );
        let up = Tensor::new(&[2, 1], &[1.0, 2.0]).unwrap();
        let dx = dense_backward(&x, &mut p, &up).unwrap();
        assert_eq!(dx.data(), &[0.5, -1.0, 1.0, -2.0]);
        assert_eq!(p.grad_weights.data(), &[7.0, 10.0]);
        assert_eq!(p.grad_bias.as_ref().unwrap().data(), &[3.0]);
    }

    #[test]
    fn feature_mismatch() {
        let p = LayerParams::zeros(&[3, 2], None);
        assert!(matches!(
            dense_forward(&Tensor::zeros(&[1, 2]), &p),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
