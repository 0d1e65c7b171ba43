use super::{gemm, Layer, LayerParams, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Symmetric `(k - 1) / 2` padding; requires odd kernels.
    Same,
    Valid,
    Explicit(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
    pub use_bias: bool,
}

impl ConvSpec {
    pub fn new(out_channels: usize, kernel: usize, stride: usize, padding: Padding, use_bias: bool) -> Self {
        Self {
            out_channels,
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding,
            use_bias,
        }
    }

    pub fn pads(&self) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        if kh == 0 || kw == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::shape(format!("kernel {:?} / stride {:?} must be >= 1", self.kernel, self.stride)));
        }
        match self.padding {
            Padding::Valid => Ok((0, 0)),
            Padding::Explicit(ph, pw) => Ok((ph, pw)),
            Padding::Same => {
                if kh % 2 == 0 {
                    return Err(Error::BadKernel(kh));
                }
                if kw % 2 == 0 {
                    return Err(Error::BadKernel(kw));
                }
                Ok(((kh - 1) / 2, (kw - 1) / 2))
            }
        }
    }

    /// Output height and width for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = self.pads()?;
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::DegenerateOutput(format!(
                "{kh}x{kw} kernel does not fit a padded {}x{} input",
                h + 2 * ph,
                w + 2 * pw
            )));
        }
        Ok(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }

    /// Fresh zeroed parameters for `in_channels` inputs.
    pub fn params(&self, in_channels: usize) -> LayerParams {
        LayerParams::zeros(
            &[self.out_channels, in_channels, self.kernel.0, self.kernel.1],
            self.use_bias.then_some(self.out_channels),
        )
    }
}

struct Geometry {
    input: Shape4,
    oh: usize,
    ow: usize,
    ph: usize,
    pw: usize,
}

impl Geometry {
    fn patch_len(&self, spec: &ConvSpec) -> usize {
        self.input.c * spec.kernel.0 * spec.kernel.1
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self, spec: &ConvSpec) -> bool {
        spec.kernel == (1, 1) && spec.stride == (1, 1) && self.ph == 0 && self.pw == 0
    }
}

fn geometry(x: &Tensor, p: &LayerParams, spec: &ConvSpec) -> Result<Geometry> {
    let input = x.dims4()?;
    let expect = [spec.out_channels, input.c, spec.kernel.0, spec.kernel.1];
    if p.weights.shape() != expect {
        return Err(Error::shape(format!(
            "conv weights {:?}, expected {expect:?}",
            p.weights.shape()
        )));
    }
    match (&p.bias, spec.use_bias) {
        (Some(b), true) if b.len() == spec.out_channels => {}
        (None, false) => {}
        _ => return Err(Error::shape("conv bias does not match spec".to_string())),
    }
    let (ph, pw) = spec.pads()?;
    let (oh, ow) = spec.output_hw(input.h, input.w)?;
    Ok(Geometry { input, oh, ow, ph, pw })
}

/// Unfolds one sample `(C, H, W)` into `(C*kh*kw, oh*ow)` columns.
fn im2col(sample: &[f64], g: &Geometry, spec: &ConvSpec, cols: &mut [f64]) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (h, w) = (g.input.h as isize, g.input.w as isize);
    let npos = g.positions();
    for c in 0..g.input.c {
        let plane = &sample[c * g.input.plane()..(c + 1) * g.input.plane()];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let out = &mut cols[row * npos..(row + 1) * npos];
                for oh in 0..g.oh {
                    let ih = (oh * sh + ki) as isize - g.ph as isize;
                    let seg = &mut out[oh * g.ow..(oh + 1) * g.ow];
                    if ih < 0 || ih >= h {
                        seg.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.input.w..(ih as usize + 1) * g.input.w];
                    for (ow, v) in seg.iter_mut().enumerate() {
                        let iw = (ow * sw + kj) as isize - g.pw as isize;
                        *v = if iw < 0 || iw >= w { 0.0 } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

/// Folds column gradients back onto one sample, accumulating overlaps.
fn col2im(cols: &[f64], g: &Geometry, spec: &ConvSpec, sample: &mut [f64]) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (h, w) = (g.input.h as isize, g.input.w as isize);
    let npos = g.positions();
    for c in 0..g.input.c {
        let plane = &mut sample[c * g.input.plane()..(c + 1) * g.input.plane()];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &cols[row * npos..(row + 1) * npos];
                for oh in 0..g.oh {
                    let ih = (oh * sh + ki) as isize - g.ph as isize;
                    if ih < 0 || ih >= h {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.input.w..(ih as usize + 1) * g.input.w];
                    for ow in 0..g.ow {
                        let iw = (ow * sw + kj) as isize - g.pw as isize;
                        if iw >= 0 && iw < w {
                            dst[iw as usize] += src[oh * g.ow + ow];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation plus bias over an `(N, C, H, W)` input.
///
/// Weights are `(out_c, C, kh, kw)`. Output spatial size is
/// `floor((H + 2ph - kh) / sh) + 1` and likewise for the width.
pub fn conv2d_forward(x: &Tensor, p: &LayerParams, spec: &ConvSpec) -> Result<Tensor> {
    let g = geometry(x, p, spec)?;
    let (n, oc) = (g.input.n, spec.out_channels);
    let k = g.patch_len(spec);
    let npos = g.positions();
    let in_len = g.input.c * g.input.plane();
    let mut out = vec![0.0; n * oc * npos];
    let mut cols = if g.is_pointwise(spec) { Vec::new() } else { vec![0.0; k * npos] };
    for s in 0..n {
        let sample = &x.data()[s * in_len..(s + 1) * in_len];
        let b: &[f64] = if g.is_pointwise(spec) {
            sample
        } else {
            im2col(sample, &g, spec, &mut cols);
            &cols
        };
        let dst = &mut out[s * oc * npos..(s + 1) * oc * npos];
        gemm(oc, k, npos, p.weights.data(), false, b, false, dst, false);
        if let Some(bias) = p.bias_slice() {
            for (o, &bv) in bias.iter().enumerate() {
                dst[o * npos..(o + 1) * npos].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    let y = Tensor::raw(vec![n, oc, g.oh, g.ow], out);
    y.ensure_finite("conv2d")?;
    Ok(y)
}

/// Gradient of [`conv2d_forward`] with respect to `x`; parameter gradients
/// are added into `p`'s buffers.
pub fn conv2d_backward(x: &Tensor, p: &mut LayerParams, spec: &ConvSpec, upstream: &Tensor) -> Result<Tensor> {
    let g = geometry(x, p, spec)?;
    let (n, oc) = (g.input.n, spec.out_channels);
    if upstream.shape() != [n, oc, g.oh, g.ow] {
        return Err(Error::shape(format!(
            "conv upstream {:?}, expected {:?}",
            upstream.shape(),
            [n, oc, g.oh, g.ow]
        )));
    }
    let k = g.patch_len(spec);
    let npos = g.positions();
    let in_len = g.input.c * g.input.plane();
    let pointwise = g.is_pointwise(spec);
    let mut dx = vec![0.0; x.len()];
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; k * npos] };
    let mut dcols = vec![0.0; k * npos];
    for s in 0..n {
        let up = &upstream.data()[s * oc * npos..(s + 1) * oc * npos];
        let sample = &x.data()[s * in_len..(s + 1) * in_len];
        let b: &[f64] = if pointwise {
            sample
        } else {
            im2col(sample, &g, spec, &mut cols);
            &cols
        };
        gemm(oc, npos, k, up, false, b, true, p.grad_weights.data_mut(), true);
        if let Some(gb) = p.grad_bias.as_mut() {
            for (o, v) in gb.data_mut().iter_mut().enumerate() {
                *v += up[o * npos..(o + 1) * npos].iter().sum::<f64>();
            }
        }
        let dst = &mut dx[s * in_len..(s + 1) * in_len];
        if pointwise {
            gemm(k, oc, npos, p.weights.data(), true, up, false, dst, true);
        } else {
            gemm(k, oc, npos, p.weights.data(), true, up, false, &mut dcols, false);
            col2im(&dcols, &g, spec, dst);
        }
    }
    Ok(Tensor::raw(x.shape().to_vec(), dx))
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub params: LayerParams,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new(in_channels: usize, spec: ConvSpec) -> Self {
        Self {
            params: spec.params(in_channels),
            spec,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.params.weights.shape()[1]
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let y = conv2d_forward(x, &self.params, &self.spec)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let x = self.cache.take().ok_or(Error::StaleCache)?;
        conv2d_backward(&x, &mut self.params, &self.spec, upstream)
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
    fn sum_of_ones() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let spec = ConvSpec::new(1, 2, 1, Padding::Valid, false);
        let mut p = spec.params(1);
        p.weights = Tensor::ones(&[1, 1, 2, 2]);
        let y = conv2d_forward(&x, &p, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::new(&[1, 1, 2, 3], &[1.0, -2.0, 3.0, 4.0, 5.5, -6.0]).unwrap();
        let spec = ConvSpec::new(1, 1, 1, Padding::Valid, true);
        let mut p = spec.params(1);
        p.weights = Tensor::ones(&[1, 1, 1, 1]);
        let y = conv2d_forward(&x, &p, &spec).unwrap();
        assert_eq!(y, x);

        let up = Tensor::new(&[1, 1, 2, 3], &[0.5, 1.0, 2.0, -1.0, 0.0, 3.0]).unwrap();
        let dx = conv2d_backward(&x, &mut p, &spec, &up).unwrap();
        assert_eq!(dx, up);
    }

    #[test]
    fn zero_upstream_leaves_buffers() {
        let x = Tensor::ones(&[2, 2, 4, 4]);
        let spec = ConvSpec::new(3, 3, 1, Padding::Same, true);
        let mut p = spec.params(2);
        p.weights = Tensor::full(p.weights.shape(), 0.3);
        let dx = conv2d_backward(&x, &mut p, &spec, &Tensor::zeros(&[2, 3, 4, 4])).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(p.grad_weights.data().iter().all(|&v| v == 0.0));
        assert!(p.grad_bias.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_padding_preserves_size() {
        for (k, h, w) in [(1, 5, 7), (3, 8, 8), (5, 6, 3), (7, 4, 9)] {
            let spec = ConvSpec::new(2, k, 1, Padding::Same, false);
            let p = spec.params(3);
            let y = conv2d_forward(&Tensor::ones(&[1, 3, h, w]), &p, &spec).unwrap();
            assert_eq!(y.shape(), &[1, 2, h, w]);
        }
        let even = ConvSpec::new(1, 2, 1, Padding::Same, false);
        assert!(matches!(even.pads(), Err(Error::BadKernel(2))));
    }

    #[test]
    fn strided_output_size_and_degenerate() {
        let spec = ConvSpec::new(4, 7, 2, Padding::Explicit(3, 3), false);
        assert_eq!(spec.output_hw(80, 80).unwrap(), (40, 40));
        let spec = ConvSpec::new(1, 5, 1, Padding::Valid, false);
        assert!(matches!(spec.output_hw(4, 9), Err(Error::DegenerateOutput(_))));
    }

    #[test]
    fn padded_corner_value() {
        // 3x3 ones kernel on a 3x3 ones input with same padding: corners see 4 ones.
        let spec = ConvSpec::new(1, 3, 1, Padding::Same, false);
        let mut p = spec.params(1);
        p.weights = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d_forward(&Tensor::ones(&[1, 1, 3, 3]), &p, &spec).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn wrong_weight_shape() {
        let spec = ConvSpec::new(2, 3, 1, Padding::Same, false);
        let p = spec.params(4);
        assert!(matches!(
            conv2d_forward(&Tensor::ones(&[1, 3, 5, 5]), &p, &spec),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
