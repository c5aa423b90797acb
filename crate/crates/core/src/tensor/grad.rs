//! Hand-written backward passes for the forward kernels in `ops`.

use super::ops::{conv_dims, valid_range};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

fn narrow_all<T: Scalar>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::narrow).collect()
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Conv2dGrads<T>> {
    const OP: &str = "conv2d_backward";
    input.expect_rank(OP, 3)?;
    kernel.expect_rank(OP, 4)?;
    let (oh, ow) = conv_dims(OP, input.shape(), kernel.shape(), stride, pad)?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    if grad_out.shape() != [co, oh, ow] {
        return Err(Error::shape(
            OP,
            "output gradient",
            format!("{:?}", [co, oh, ow]),
            format!("{:?}", grad_out.shape()),
        ));
    }

    let x = input.data();
    let k = kernel.data();
    let g = grad_out.data();
    let mut gi = vec![0f64; c * h * w];
    let mut gk = vec![0f64; kernel.len()];
    let mut gb = vec![0f64; co];
    for o in 0..co {
        let go = &g[o * oh * ow..(o + 1) * oh * ow];
        gb[o] = go.iter().map(|v| v.widen()).sum();
        for i in 0..c {
            let plane = &x[i * h * w..(i + 1) * h * w];
            let gplane = &mut gi[i * h * w..(i + 1) * h * w];
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(ky, pad, stride, h, oh);
                for kx in 0..kw {
                    let idx = ((o * c + i) * kh + ky) * kw + kx;
                    let wv = k[idx].widen();
                    let (ox0, ox1) = valid_range(kx, pad, stride, w, ow);
                    let mut acc = 0f64;
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        for ox in ox0..ox1 {
                            let ix = ox * stride + kx - pad;
                            let gv = go[oy * ow + ox].widen();
                            acc += gv * plane[iy * w + ix].widen();
                            gplane[iy * w + ix] += wv * gv;
                        }
                    }
                    gk[idx] += acc;
                }
            }
        }
    }
    Ok(Conv2dGrads {
        input: Tensor::from_kernel(OP, input.shape().to_vec(), narrow_all(gi))?,
        kernel: Tensor::from_kernel(OP, kernel.shape().to_vec(), narrow_all(gk))?,
        bias: Tensor::from_kernel(OP, vec![co], narrow_all(gb))?,
    })
}

/// Gradient of `relu` given the forward input (or output; both share sign).
pub fn relu_backward<T: Scalar>(forward: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if forward.shape() != grad_out.shape() {
        return Err(Error::shape(
            "relu_backward",
            "gradient shape",
            format!("{:?}", forward.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let data = forward
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_kernel("relu_backward", forward.shape().to_vec(), data)
}

/// Routes each window's gradient to the first maximal input, matching the
/// tie-break of the forward kernel.
pub fn maxpool2d_backward<T: Scalar>(
    input: &Tensor<T>,
    k: usize,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    const OP: &str = "maxpool2d_backward";
    input.expect_rank(OP, 3)?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if k == 0 || stride == 0 || k > h || k > w {
        return Err(Error::invalid(OP, format!("window {k} invalid for {h}x{w}")));
    }
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    if grad_out.shape() != [c, oh, ow] {
        return Err(Error::shape(
            OP,
            "output gradient",
            format!("{:?}", [c, oh, ow]),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let x = input.data();
    let mut gi = vec![T::zero(); x.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..k {
                    for dx in 0..k {
                        let at = base + (oy * stride + dy) * w + ox * stride + dx;
                        if x[at] > x[best] {
                            best = at;
                        }
                    }
                }
                gi[best] += grad_out.data()[(ch * oh + oy) * ow + ox];
            }
        }
    }
    Tensor::from_kernel(OP, input.shape().to_vec(), gi)
}

/// Returns `(d input, d weight, d bias)` for `W x + b`.
pub fn affine_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    const OP: &str = "affine_backward";
    weight.expect_rank(OP, 2)?;
    let (m, n) = (weight.shape()[0], weight.shape()[1]);
    if x.len() != n {
        return Err(Error::shape(OP, "input length", n, x.len()));
    }
    if grad_out.len() != m {
        return Err(Error::shape(OP, "output gradient length", m, grad_out.len()));
    }
    let mut gx = vec![0f64; n];
    let mut gw = Vec::with_capacity(m * n);
    for (row, &g) in weight.data().chunks_exact(n).zip(grad_out.data()) {
        let g = g.widen();
        for ((acc, &wv), &xv) in gx.iter_mut().zip(row).zip(x.data()) {
            *acc += wv.widen() * g;
            gw.push(T::narrow(g * xv.widen()));
        }
    }
    Ok((
        Tensor::from_kernel(OP, vec![n], narrow_all(gx))?,
        Tensor::from_kernel(OP, vec![m, n], gw)?,
        grad_out.clone().reshape(vec![m])?,
    ))
}

pub fn global_avgpool_backward<T: Scalar>(shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "global_avgpool_backward";
    if shape.len() != 3 || grad_out.len() != shape[0] {
        return Err(Error::shape(OP, "channels", format!("{shape:?}"), grad_out.len()));
    }
    let hw = shape[1] * shape[2];
    let scale = 1.0 / hw as f64;
    let mut data = Vec::with_capacity(shape[0] * hw);
    for &g in grad_out.data() {
        let v = T::narrow(g.widen() * scale);
        data.extend(std::iter::repeat_n(v, hw));
    }
    Tensor::from_kernel(OP, shape.to_vec(), data)
}
