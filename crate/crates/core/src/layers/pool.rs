//! Pooling kernels. Max-style pools route gradients to the first maximal
//! element in scan order.

use super::{Layer, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};

/// Valid (unpadded) 2-D max pooling.
///
/// Returns the pooled map and, for each output element, the flat input
/// index that won.
pub fn maxpool2d(x: &Tensor, window: (usize, usize), stride: (usize, usize)) -> Result<(Tensor, Vec<usize>)> {
    let s = x.dims4()?;
    let (kh, kw) = window;
    let (sh, sw) = stride;
    if kh == 0 || kw == 0 || sh == 0 || sw == 0 || kh > s.h || kw > s.w {
        return Err(Error::DegenerateOutput(format!(
            "{kh}x{kw} pool window (stride {sh}x{sw}) on a {}x{} map",
            s.h, s.w
        )));
    }
    let oh = (s.h - kh) / sh + 1;
    let ow = (s.w - kw) / sw + 1;
    let data = x.data();
    let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..s.n * s.c {
        let base = plane * s.plane();
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + i * sh * s.w + j * sw;
                for di in 0..kh {
                    for dj in 0..kw {
                        let idx = base + (i * sh + di) * s.w + j * sw + dj;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::raw(vec![s.n, s.c, oh, ow], out), argmax))
}

/// Scatters `upstream` onto the winning input positions.
pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], upstream: &Tensor) -> Result<Tensor> {
    if upstream.len() != argmax.len() {
        return Err(Error::shape(format!(
            "pool upstream has {} entries, expected {}",
            upstream.len(),
            argmax.len()
        )));
    }
    let mut dx = vec![0.0; input_shape.iter().product()];
    for (&idx, &g) in argmax.iter().zip(upstream.data()) {
        dx[idx] += g;
    }
    Ok(Tensor::raw(input_shape.to_vec(), dx))
}

/// Per-channel spatial mean, `(N, C, H, W) -> (N, C, 1, 1)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let s = x.dims4()?;
    let hw = s.plane() as f64;
    let out = x.data().chunks(s.plane()).map(|p| p.iter().sum::<f64>() / hw).collect();
    Ok(Tensor::raw(vec![s.n, s.c, 1, 1], out))
}

pub fn global_avg_pool_backward(input: Shape4, upstream: &Tensor) -> Result<Tensor> {
    if upstream.shape() != [input.n, input.c, 1, 1] {
        return Err(Error::shape(format!("global pool upstream {:?}", upstream.shape())));
    }
    let hw = input.plane();
    let mut dx = Vec::with_capacity(input.numel());
    for &g in upstream.data() {
        dx.extend(std::iter::repeat_n(g / hw as f64, hw));
    }
    Ok(Tensor::raw(input.to_vec(), dx))
}

/// Per-channel spatial maximum with winning flat indices.
pub fn global_max_pool(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let s = x.dims4()?;
    let mut out = Vec::with_capacity(s.n * s.c);
    let mut argmax = Vec::with_capacity(s.n * s.c);
    for (p, plane) in x.data().chunks(s.plane()).enumerate() {
        let mut best = 0;
        for (i, &v) in plane.iter().enumerate() {
            if v > plane[best] {
                best = i;
            }
        }
        out.push(plane[best]);
        argmax.push(p * s.plane() + best);
    }
    Ok((Tensor::raw(vec![s.n, s.c, 1, 1], out), argmax))
}

pub fn global_max_pool_backward(input: Shape4, argmax: &[usize], upstream: &Tensor) -> Result<Tensor> {
    maxpool2d_backward(&input.to_vec(), argmax, upstream)
}

/// Mean and max across channels per pixel, `(N, C, H, W) -> (N, 2, H, W)`.
///
/// Plane 0 holds the channel mean, plane 1 the channel max. The second
/// return value gives the winning channel for every `(n, pixel)`.
pub fn channelwise_pool(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let s = x.dims4()?;
    let hw = s.plane();
    let data = x.data();
    let mut out = vec![0.0; s.n * 2 * hw];
    let mut argmax = vec![0usize; s.n * hw];
    for n in 0..s.n {
        let sample = &data[n * s.c * hw..(n + 1) * s.c * hw];
        let (mean, rest) = out[n * 2 * hw..(n + 1) * 2 * hw].split_at_mut(hw);
        let winners = &mut argmax[n * hw..(n + 1) * hw];
        mean.copy_from_slice(&sample[..hw]);
        rest.copy_from_slice(&sample[..hw]);
        for c in 1..s.c {
            let plane = &sample[c * hw..(c + 1) * hw];
            for i in 0..hw {
                mean[i] += plane[i];
                if plane[i] > rest[i] {
                    rest[i] = plane[i];
                    winners[i] = c;
                }
            }
        }
        mean.iter_mut().for_each(|v| *v /= s.c as f64);
    }
    Ok((Tensor::raw(vec![s.n, 2, s.h, s.w], out), argmax))
}

pub fn channelwise_pool_backward(input: Shape4, argmax: &[usize], upstream: &Tensor) -> Result<Tensor> {
    if upstream.shape() != [input.n, 2, input.h, input.w] {
        return Err(Error::shape(format!("channel pool upstream {:?}", upstream.shape())));
    }
    let hw = input.plane();
    let mut dx = vec![0.0; input.numel()];
    let up = upstream.data();
    for n in 0..input.n {
        let g_mean = &up[n * 2 * hw..n * 2 * hw + hw];
        let g_max = &up[n * 2 * hw + hw..(n + 1) * 2 * hw];
        let sample = &mut dx[n * input.c * hw..(n + 1) * input.c * hw];
        for c in 0..input.c {
            let plane = &mut sample[c * hw..(c + 1) * hw];
            for (v, g) in plane.iter_mut().zip(g_mean) {
                *v = g / input.c as f64;
            }
        }
        for i in 0..hw {
            sample[argmax[n * hw + i] * hw + i] += g_max[i];
        }
    }
    Ok(Tensor::raw(input.to_vec(), dx))
}

#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub window: (usize, usize),
    pub stride: (usize, usize),
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(window: usize, stride: usize) -> Self {
        Self {
            window: (window, window),
            stride: (stride, stride),
            cache: None,
        }
    }
}

impl Layer for MaxPool2d {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let (y, argmax) = maxpool2d(x, self.window, self.stride)?;
        self.cache = Some((x.shape().to_vec(), argmax));
        Ok(y)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let (shape, argmax) = self.cache.take().ok_or(Error::StaleCache)?;
        maxpool2d_backward(&shape, &argmax, upstream)
    }
}

/// Global average pooling followed by flattening to `(N, C)`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    input: Option<Shape4>,
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let s = x.dims4()?;
        self.input = Some(s);
        global_avg_pool(x)?.reshape(&[s.n, s.c])
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let s = self.input.take().ok_or(Error::StaleCache)?;
        global_avg_pool_backward(s, &upstream.reshape(&[s.n, s.c, 1, 1])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_picks_max() {
        let x = Tensor::new(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2d(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn maxpool_tie_goes_to_first() {
        let x = Tensor::full(&[1, 1, 4, 4], 2.0);
        let (_, arg) = maxpool2d(&x, (2, 2), (2, 2)).unwrap();
        let dx = maxpool2d_backward(x.shape(), &arg, &Tensor::ones(&[1, 1, 2, 2])).unwrap();
        let expect = [
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(dx.data(), &expect);
    }

    #[test]
    fn maxpool_degenerate() {
        let x = Tensor::ones(&[1, 1, 1, 3]);
        assert!(matches!(maxpool2d(&x, (2, 2), (2, 2)), Err(Error::DegenerateOutput(_))));
    }

    #[test]
    fn maxpool_odd_size_floors() {
        let x = Tensor::ones(&[1, 2, 5, 5]);
        let (y, _) = maxpool2d(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
    }

    #[test]
    fn global_pools() {
        let x = Tensor::new(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 7.0, 7.0, 7.0, 7.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5, 7.0]);
        let (m, arg) = global_max_pool(&x).unwrap();
        assert_eq!(m.data(), &[4.0, 7.0]);
        assert_eq!(arg, vec![3, 4]);
    }

    #[test]
    fn avg_pool_backward_uniform() {
        let s = Shape4::new(1, 1, 2, 2).unwrap();
        let dx = global_avg_pool_backward(s, &Tensor::new(&[1, 1, 1, 1], &[4.0]).unwrap()).unwrap();
        assert_eq!(dx.data(), &[1.0; 4]);
    }

    #[test]
    fn channel_pool_values() {
        let x = Tensor::new(&[1, 2, 1, 1], &[1.0, 3.0]).unwrap();
        let (y, arg) = channelwise_pool(&x).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0]);
        assert_eq!(arg, vec![1]);

        let single = Tensor::new(&[1, 1, 2, 2], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let (y, _) = channelwise_pool(&single).unwrap();
        assert_eq!(&y.data()[..4], single.data());
        assert_eq!(&y.data()[4..], single.data());
    }

    #[test]
    fn gap_then_unit_gate_is_identity() {
        let x = Tensor::new(&[1, 2, 1, 2], &[0.3, -1.0, 2.0, 5.0]).unwrap();
        let gate = global_avg_pool(&x).unwrap().map(|_| 1.0);
        assert_eq!(x.mul(&gate).unwrap(), x);
    }
}
