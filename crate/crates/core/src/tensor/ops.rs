use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Output positions `o` in `[lo, hi)` for which `o * stride + k - pad` lands
/// inside `[0, in_len)`.
#[inline]
pub(super) fn valid_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride).min(out_len)
    };
    let reach = in_len + pad;
    let hi = if reach <= k {
        0
    } else {
        (reach - k).div_ceil(stride).min(out_len)
    };
    (lo, hi.max(lo))
}

pub(super) fn conv_dims(
    op: &'static str,
    input: &[usize],
    kernel: &[usize],
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    let (c, h, w) = (input[0], input[1], input[2]);
    let (ci, kh, kw) = (kernel[1], kernel[2], kernel[3]);
    if ci != c {
        return Err(Error::shape(op, "kernel input channels (dim 1)", c, ci));
    }
    if stride == 0 {
        return Err(Error::invalid(op, "stride must be positive"));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid(op, format!("kernel {kh}x{kw} must have odd extents")));
    }
    if h + 2 * pad < kh {
        return Err(Error::shape(
            op,
            "input height (dim 1) + 2*pad",
            format!(">= {kh}"),
            h + 2 * pad,
        ));
    }
    if w + 2 * pad < kw {
        return Err(Error::shape(
            op,
            "input width (dim 2) + 2*pad",
            format!(">= {kw}"),
            w + 2 * pad,
        ));
    }
    Ok(((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1))
}

/// 2-D cross-correlation (no kernel flip) over a `[C, H, W]` input.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d";
    input.expect_rank(OP, 3)?;
    kernel.expect_rank(OP, 4)?;
    bias.expect_rank(OP, 1)?;
    let (oh, ow) = conv_dims(OP, input.shape(), kernel.shape(), stride, pad)?;
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let (co, ci, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if bias.len() != co {
        return Err(Error::shape(OP, "bias length (dim 0)", co, bias.len()));
    }

    let x = input.data();
    let k = kernel.data();
    let mut out = Vec::with_capacity(co * oh * ow);
    let mut acc = vec![0f64; oh * ow];
    for o in 0..co {
        acc.fill(bias.data()[o].widen());
        for i in 0..ci {
            let plane = &x[i * h * w..(i + 1) * h * w];
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(ky, pad, stride, h, oh);
                for kx in 0..kw {
                    let wv = k[((o * ci + i) * kh + ky) * kw + kx].widen();
                    let (ox0, ox1) = valid_range(kx, pad, stride, w, ow);
                    if ox0 == ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let row = &plane[iy * w..(iy + 1) * w];
                        let arow = &mut acc[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let ix0 = ox0 + kx - pad;
                            for (a, &v) in arow[ox0..ox1].iter_mut().zip(&row[ix0..ix0 + ox1 - ox0]) {
                                *a += wv * v.widen();
                            }
                        } else {
                            for (ox, a) in arow.iter_mut().enumerate().take(ox1).skip(ox0) {
                                *a += wv * row[ox * stride + kx - pad].widen();
                            }
                        }
                    }
                }
            }
        }
        out.extend(acc.iter().map(|&v| T::narrow(v)));
    }
    Tensor::from_kernel(OP, vec![co, oh, ow], out)
}

pub fn relu<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: t.shape.clone(),
        data: t
            .data
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect(),
    }
}

/// Window maxima over `[C, H, W]` with a square `k`x`k` window.
pub fn maxpool2d<T: Scalar>(t: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    const OP: &str = "maxpool2d";
    t.expect_rank(OP, 3)?;
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if k == 0 || stride == 0 {
        return Err(Error::invalid(OP, "window and stride must be positive"));
    }
    if k > h {
        return Err(Error::shape(OP, "input height (dim 1)", format!(">= {k}"), h));
    }
    if k > w {
        return Err(Error::shape(OP, "input width (dim 2)", format!(">= {k}"), w));
    }
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let x = t.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = T::neg_infinity();
                for dy in 0..k {
                    let row = (oy * stride + dy) * w + ox * stride;
                    for &v in &plane[row..row + k] {
                        if v > m {
                            m = v;
                        }
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::from_kernel(OP, vec![c, oh, ow], out)
}

/// `W x + b` for `x: [n]`, `W: [m, n]`, `b: [m]`.
pub fn affine<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "affine";
    x.expect_rank(OP, 1)?;
    weight.expect_rank(OP, 2)?;
    bias.expect_rank(OP, 1)?;
    let (m, n) = (weight.shape()[0], weight.shape()[1]);
    if x.len() != n {
        return Err(Error::shape(OP, "weight columns (dim 1)", x.len(), n));
    }
    if bias.len() != m {
        return Err(Error::shape(OP, "bias length (dim 0)", m, bias.len()));
    }
    let out = weight
        .data()
        .chunks_exact(n)
        .zip(bias.data())
        .map(|(row, &b)| {
            let dot: f64 = row.iter().zip(x.data()).map(|(&w, &v)| w.widen() * v.widen()).sum();
            T::narrow(dot + b.widen())
        })
        .collect();
    Tensor::from_kernel(OP, vec![m], out)
}

/// Numerically stable softmax over a vector.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_rank("softmax", 1)?;
    Ok(Tensor {
        shape: x.shape.clone(),
        data: softmax_slice(x.data()),
    })
}

pub(crate) fn softmax_slice<T: Scalar>(x: &[T]) -> Vec<T> {
    let m = x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.widen()));
    let exps: Vec<f64> = x.iter().map(|&v| (v.widen() - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| T::narrow(e / z)).collect()
}

pub fn residual_add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "residual_add",
            "operand shape",
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_kernel("residual_add", a.shape().to_vec(), data)
}

/// Mean over the spatial axes of a `[C, H, W]` tensor.
pub fn global_avgpool<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    t.expect_rank("global_avgpool", 3)?;
    let c = t.shape()[0];
    let hw = t.shape()[1] * t.shape()[2];
    let out = t
        .data()
        .chunks_exact(hw)
        .map(|plane| T::narrow(plane.iter().map(|v| v.widen()).sum::<f64>() / hw as f64))
        .collect();
    Tensor::from_kernel("global_avgpool", vec![c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Six nested loops straight from the definition, zero padding explicit.
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, s: usize, p: usize) -> Vec<f64> {
        let (c, h, w) = (x.shape()[0] as isize, x.shape()[1] as isize, x.shape()[2] as isize);
        let (co, kh, kw) = (k.shape()[0], k.shape()[2] as isize, k.shape()[3] as isize);
        let oh = (h + 2 * p as isize - kh) / s as isize + 1;
        let ow = (w + 2 * p as isize - kw) / s as isize + 1;
        let mut out = vec![];
        for o in 0..co as isize {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[o as usize];
                    for i in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = oy * s as isize + ky - p as isize;
                                let ix = ox * s as isize + kx - p as isize;
                                if iy < 0 || ix < 0 || iy >= h || ix >= w {
                                    continue;
                                }
                                acc += k.data()[(((o * c + i) * kh + ky) * kw + kx) as usize]
                                    * x.data()[((i * h + iy) * w + ix) as usize];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn conv_scalar_multiply_add() {
        let y = conv2d(
            &t(&[1, 1, 1], &[2.0]),
            &t(&[1, 1, 1, 1], &[3.0]),
            &t(&[1], &[1.0]),
            1,
            0,
        )
        .unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn conv_padded_ones_counts_overlap() {
        let x = Tensor::<f64>::full(&[1, 3, 3], 1.0);
        let k = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(y.data()[corner], 4.0);
        }
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let err = conv2d(
            &Tensor::<f32>::zeros(&[2, 4, 4]),
            &Tensor::zeros(&[1, 3, 3, 3]),
            &Tensor::zeros(&[1]),
            1,
            1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    #[test]
    fn conv_rejects_even_kernel_and_small_input() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 1, 2, 2]), &Tensor::zeros(&[1]), 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 1, 3, 3]), &Tensor::zeros(&[1]), 1, 0).is_err());
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let c = rng.random_range(1..=4);
            let co = rng.random_range(1..=4);
            let h = rng.random_range(3..=8);
            let w = rng.random_range(3..=8);
            let k = [1, 3, 5][rng.random_range(0..3)];
            let pad = rng.random_range(0..=2);
            let stride = rng.random_range(1..=2);
            if h + 2 * pad < k || w + 2 * pad < k {
                continue;
            }
            let x = random(&mut rng, &[c, h, w]);
            let kern = random(&mut rng, &[co, c, k, k]);
            let b = random(&mut rng, &[co]);
            let fast = conv2d(&x, &kern, &b, stride, pad).unwrap();
            let slow = naive_conv(&x, &kern, &b, stride, pad);
            assert_eq!(fast.len(), slow.len());
            for (a, e) in fast.data().iter().zip(&slow) {
                assert!((a - e).abs() <= 1e-5 * e.abs().max(1.0), "{a} vs {e}");
            }
        }
    }

    #[test]
    fn relu_cases() {
        let r = relu(&t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        assert!(relu(&t(&[2], &[-3.0, -0.5])).data().iter().all(|&v| v == 0.0));
        let x = t(&[4], &[-1.0, 2.0, -3.0, 4.0]);
        assert_eq!(relu(&relu(&x)), relu(&x));
    }

    #[test]
    fn maxpool_cases() {
        let p = maxpool2d(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), 2, 2).unwrap();
        assert_eq!(p.data(), &[4.0]);
        let c = maxpool2d(&Tensor::<f64>::full(&[2, 4, 6], 1.5), 2, 2).unwrap();
        assert_eq!(c.shape(), &[2, 2, 3]);
        assert!(c.data().iter().all(|&v| v == 1.5));
        let x = t(&[1, 2, 3], &[1.0, -2.0, 3.0, 4.0, 5.0, -6.0]);
        assert_eq!(maxpool2d(&x, 1, 1).unwrap(), x);
        assert!(maxpool2d(&x, 3, 1).is_err());
    }

    #[test]
    fn affine_cases() {
        let x = t(&[2], &[2.0, 3.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(affine(&x, &eye, &Tensor::zeros(&[2])).unwrap(), x);
        assert_eq!(
            affine(&x, &Tensor::zeros(&[1, 2]), &t(&[1], &[5.0])).unwrap().data(),
            &[5.0]
        );
        assert_eq!(
            affine(&x, &t(&[1, 2], &[1.0, 1.0]), &t(&[1], &[0.0])).unwrap().data(),
            &[5.0]
        );
        assert!(affine(&x, &Tensor::zeros(&[1, 3]), &t(&[1], &[0.0])).is_err());
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&t(&[2], &[0.0, 0.0])).unwrap().data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::<f32>::vector(vec![1000.0, 0.0]).unwrap()).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-6 && s.data()[1] < 1e-6);
        assert!(s.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn residual_cases() {
        let a = t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]);
        let neg = a.map("neg", |v| -v).unwrap();
        assert_eq!(residual_add(&a, &Tensor::zeros(&[2, 2])).unwrap(), a);
        assert!(residual_add(&a, &neg).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(residual_add(&a, &Tensor::zeros(&[4])).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            xs in prop::collection::vec(-50.0f64..50.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let x = Tensor::vector(xs.clone()).unwrap();
            let s = softmax(&x).unwrap();
            prop_assert!((s.sum() - 1.0).abs() < 1e-6);
            let shifted = softmax(&Tensor::vector(xs.iter().map(|v| v + c).collect()).unwrap()).unwrap();
            for (a, b) in s.data().iter().zip(shifted.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn residual_add_commutes(xs in prop::collection::vec(-10.0f64..10.0, 1..20)) {
            let n = xs.len();
            let a = Tensor::vector(xs.clone()).unwrap();
            let b = Tensor::vector(xs.iter().rev().copied().collect()).unwrap();
            prop_assert_eq!(residual_add(&a, &b).unwrap(), residual_add(&b, &a).unwrap());
            prop_assert_eq!(residual_add(&a, &b).unwrap().shape().to_vec(), vec![n]);
        }

        #[test]
        fn conv_and_pool_shapes_follow_formula(
            c in 1usize..4, co in 1usize..4, h in 1usize..10, w in 1usize..10,
            khalf in 0usize..3, pad in 0usize..3, stride in 1usize..3, pk in 1usize..4,
        ) {
            let k = 2 * khalf + 1;
            let x = Tensor::<f32>::full(&[c, h, w], 0.5);
            let kern = Tensor::<f32>::full(&[co, c, k, k], 0.1);
            let res = conv2d(&x, &kern, &Tensor::zeros(&[co]), stride, pad);
            if h + 2 * pad >= k && w + 2 * pad >= k {
                let y = res.unwrap();
                prop_assert_eq!(y.shape().to_vec(), vec![co, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1]);
            } else {
                prop_assert!(res.is_err());
            }
            let pooled = maxpool2d(&x, pk, stride);
            if pk <= h && pk <= w {
                prop_assert_eq!(pooled.unwrap().shape().to_vec(), vec![c, (h - pk) / stride + 1, (w - pk) / stride + 1]);
            } else {
                prop_assert!(pooled.is_err());
            }
        }
    }
}
