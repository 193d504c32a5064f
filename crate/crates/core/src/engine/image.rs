//! Planar convolution and mean pooling on `B x H x W x C` images.

use rayon::prelude::*;

use super::linalg::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Output extent of a sliding window, or `None` when the window does not fit.
pub fn out_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || size + 2 * pad < kernel {
        return None;
    }
    Some((size + 2 * pad - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// `weights[((ky * k + kx) * C_in + c) * C_out + f]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dWeights {
    pub geometry: Conv2dGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2dWeights {
    pub fn zeros(geometry: Conv2dGeometry, in_channels: usize, out_channels: usize) -> Self {
        let k = geometry.kernel;
        Self {
            geometry,
            in_channels,
            out_channels,
            weights: vec![0.0; k * k * in_channels * out_channels],
            bias: vec![0.0; out_channels],
        }
    }

    fn patch_len(&self) -> usize {
        self.geometry.kernel * self.geometry.kernel * self.in_channels
    }
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads {
    pub input: Tensor,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

struct Frame {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

fn frame(input: &Tensor, channels: usize, kernel: usize, stride: usize, pad: usize, what: &str) -> Result<Frame> {
    input.expect_rank(4, what)?;
    let d = input.dims();
    if d[3] != channels {
        return Err(Error::Shape(format!("{what} expects {channels} channels, got dims {d:?}")));
    }
    match (out_extent(d[1], kernel, stride, pad), out_extent(d[2], kernel, stride, pad)) {
        (Some(oh), Some(ow)) => Ok(Frame {
            h: d[1],
            w: d[2],
            oh,
            ow,
        }),
        _ => Err(Error::Shape(format!(
            "{what}: window {kernel}/{stride} pad {pad} does not fit a {}x{} image",
            d[1], d[2]
        ))),
    }
}

/// Unfold one sample into `(OH*OW) x (k*k*C)` rows; zero outside the image.
fn im2col(x: &[f64], f: &Frame, w: &Conv2dWeights) -> Vec<f64> {
    let Conv2dGeometry { kernel: k, stride, pad } = w.geometry;
    let c = w.in_channels;
    let mut cols = vec![0.0; f.oh * f.ow * w.patch_len()];
    for oy in 0..f.oh {
        for ox in 0..f.ow {
            let row = &mut cols[(oy * f.ow + ox) * w.patch_len()..][..w.patch_len()];
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= f.h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= f.w as isize {
                        continue;
                    }
                    let src = (iy as usize * f.w + ix as usize) * c;
                    row[(ky * k + kx) * c..][..c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], f: &Frame, w: &Conv2dWeights, out: &mut [f64]) {
    let Conv2dGeometry { kernel: k, stride, pad } = w.geometry;
    let c = w.in_channels;
    for oy in 0..f.oh {
        for ox in 0..f.ow {
            let row = &cols[(oy * f.ow + ox) * w.patch_len()..][..w.patch_len()];
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= f.h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= f.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * f.w + ix as usize) * c;
                    for (o, v) in out[dst..dst + c].iter_mut().zip(&row[(ky * k + kx) * c..][..c]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(input: &Tensor, w: &Conv2dWeights) -> Result<Tensor> {
    let g = w.geometry;
    let f = frame(input, w.in_channels, g.kernel, g.stride, g.pad, "conv2d")?;
    input.check_finite("conv2d input")?;
    let (b, co, pl) = (input.batch(), w.out_channels, w.patch_len());
    let positions = f.oh * f.ow;
    let mut out = vec![0.0; b * positions * co];
    out.par_chunks_mut(positions * co).enumerate().for_each(|(s, o)| {
        let cols = im2col(input.sample(s), &f, w);
        for row in o.chunks_mut(co) {
            row.copy_from_slice(&w.bias);
        }
        gemm(positions, pl, co, &cols, false, &w.weights, false, 1.0, o);
    });
    Tensor::new(vec![b, f.oh, f.ow, co], out)
}

pub fn conv2d_backward(input: &Tensor, w: &Conv2dWeights, grad_out: &Tensor) -> Result<Conv2dGrads> {
    let g = w.geometry;
    let f = frame(input, w.in_channels, g.kernel, g.stride, g.pad, "conv2d")?;
    let (b, co, pl) = (input.batch(), w.out_channels, w.patch_len());
    if grad_out.dims() != [b, f.oh, f.ow, co] {
        return Err(Error::Shape(format!(
            "conv2d gradient dims {:?}, expected {:?}",
            grad_out.dims(),
            [b, f.oh, f.ow, co]
        )));
    }
    let positions = f.oh * f.ow;
    let partials: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..b)
        .into_par_iter()
        .map(|s| {
            let cols = im2col(input.sample(s), &f, w);
            let go = grad_out.sample(s);
            let mut gw = vec![0.0; pl * co];
            gemm(pl, positions, co, &cols, true, go, false, 0.0, &mut gw);
            let mut gb = vec![0.0; co];
            for row in go.chunks(co) {
                gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            let mut gcols = vec![0.0; positions * pl];
            gemm(positions, co, pl, go, false, &w.weights, true, 0.0, &mut gcols);
            let mut gin = vec![0.0; f.h * f.w * w.in_channels];
            col2im(&gcols, &f, w, &mut gin);
            (gin, gw, gb)
        })
        .collect();
    let mut gw = vec![0.0; pl * co];
    let mut gb = vec![0.0; co];
    let mut gin = Vec::with_capacity(input.len());
    for (pi, pw, pb) in partials {
        gw.iter_mut().zip(&pw).for_each(|(a, v)| *a += v);
        gb.iter_mut().zip(&pb).for_each(|(a, v)| *a += v);
        gin.extend(pi);
    }
    Ok(Conv2dGrads {
        input: Tensor::new(input.dims().to_vec(), gin)?,
        weights: gw,
        bias: gb,
    })
}

/// Mean over `k x k` windows with the given stride, no padding.
pub fn mean_pool2d_forward(input: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let c = *input.dims().last().unwrap_or(&0);
    let f = frame(input, c, kernel, stride, 0, "mean pool")?;
    let b = input.batch();
    let norm = 1.0 / (kernel * kernel) as f64;
    let mut out = vec![0.0; b * f.oh * f.ow * c];
    for s in 0..b {
        let x = input.sample(s);
        let o = &mut out[s * f.oh * f.ow * c..][..f.oh * f.ow * c];
        for oy in 0..f.oh {
            for ox in 0..f.ow {
                let dst = &mut o[(oy * f.ow + ox) * c..][..c];
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let src = ((oy * stride + ky) * f.w + ox * stride + kx) * c;
                        dst.iter_mut().zip(&x[src..src + c]).for_each(|(a, v)| *a += v);
                    }
                }
                dst.iter_mut().for_each(|a| *a *= norm);
            }
        }
    }
    Tensor::new(vec![b, f.oh, f.ow, c], out)
}

pub fn mean_pool2d_backward(input_dims: &[usize], grad_out: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let probe = Tensor::zeros(vec![1, input_dims[1], input_dims[2], input_dims[3]]);
    let c = input_dims[3];
    let f = frame(&probe, c, kernel, stride, 0, "mean pool")?;
    let b = input_dims[0];
    if grad_out.dims() != [b, f.oh, f.ow, c] {
        return Err(Error::Shape(format!(
            "mean pool gradient dims {:?}, expected {:?}",
            grad_out.dims(),
            [b, f.oh, f.ow, c]
        )));
    }
    let norm = 1.0 / (kernel * kernel) as f64;
    let mut gin = vec![0.0; b * f.h * f.w * c];
    for s in 0..b {
        let go = grad_out.sample(s);
        let gi = &mut gin[s * f.h * f.w * c..][..f.h * f.w * c];
        for oy in 0..f.oh {
            for ox in 0..f.ow {
                let src = &go[(oy * f.ow + ox) * c..][..c];
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let dst = ((oy * stride + ky) * f.w + ox * stride + kx) * c;
                        gi[dst..dst + c].iter_mut().zip(src).for_each(|(a, v)| *a += v * norm);
                    }
                }
            }
        }
    }
    Tensor::new(input_dims.to_vec(), gin)
}
