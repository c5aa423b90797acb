use std::collections::BTreeMap;

use super::cross_entropy_logits;
use crate::backbone::{apply_layer, needs_projection, LayerKind, NetworkSpec, ParamKey, WeightStore};
use crate::error::Result;
use crate::exit_head::{bof_pool, bof_pool_backward, ExitHead};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Parameter gradients accumulated in f64.
pub type Gradients = BTreeMap<ParamKey, Vec<f64>>;

pub(crate) fn accumulate<T: Scalar>(into: &mut Gradients, key: ParamKey, g: &Tensor<T>) {
    let slot = into.entry(key).or_insert_with(|| vec![0.0; g.len()]);
    for (a, b) in slot.iter_mut().zip(g.data()) {
        *a += b.widen();
    }
}

fn reshape_like<T: Scalar>(g: Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if g.shape() == shape {
        Ok(g)
    } else {
        g.reshape(shape.to_vec())
    }
}

/// Gradient of one layer given the gradient of its output.
fn layer_backward<T: Scalar>(
    net: &NetworkSpec,
    index: usize,
    weights: &WeightStore<T>,
    x: &Tensor<T>,
    grad: Tensor<T>,
    grads: &mut Gradients,
) -> Result<Tensor<T>> {
    let key = |role: &str| ParamKey::new(index, role);
    match net.layers()[index].kind {
        LayerKind::Conv { stride, pad, .. } => {
            let g = tensor::conv2d_backward(x, weights.get(index, "kernel")?, &grad, stride, pad)?;
            accumulate(grads, key("kernel"), &g.kernel);
            accumulate(grads, key("bias"), &g.bias);
            Ok(g.input)
        }
        LayerKind::Relu => tensor::relu_backward(x, &grad),
        LayerKind::Maxpool { k, stride } => tensor::maxpool2d_backward(x, k, stride, &grad),
        LayerKind::ResidualBlock { out_channels, stride } => {
            let (k1, b1) = (weights.get(index, "conv1.kernel")?, weights.get(index, "conv1.bias")?);
            let (k2, b2) = (weights.get(index, "conv2.kernel")?, weights.get(index, "conv2.bias")?);
            let a1 = tensor::conv2d(x, k1, b1, stride, 1)?;
            let h1 = tensor::relu(&a1);
            let a2 = tensor::conv2d(&h1, k2, b2, 1, 1)?;
            let project = needs_projection(x.shape(), out_channels, stride);
            let skip = if project {
                tensor::conv2d(
                    x,
                    weights.get(index, "proj.kernel")?,
                    weights.get(index, "proj.bias")?,
                    stride,
                    0,
                )?
            } else {
                x.clone()
            };
            let sum = tensor::residual_add(&a2, &skip)?;
            let gs = tensor::relu_backward(&sum, &grad)?;
            let g2 = tensor::conv2d_backward(&h1, k2, &gs, 1, 1)?;
            accumulate(grads, key("conv2.kernel"), &g2.kernel);
            accumulate(grads, key("conv2.bias"), &g2.bias);
            let ga1 = tensor::relu_backward(&a1, &g2.input)?;
            let g1 = tensor::conv2d_backward(x, k1, &ga1, stride, 1)?;
            accumulate(grads, key("conv1.kernel"), &g1.kernel);
            accumulate(grads, key("conv1.bias"), &g1.bias);
            let g_skip = if project {
                let gp = tensor::conv2d_backward(x, weights.get(index, "proj.kernel")?, &gs, stride, 0)?;
                accumulate(grads, key("proj.kernel"), &gp.kernel);
                accumulate(grads, key("proj.bias"), &gp.bias);
                gp.input
            } else {
                gs
            };
            tensor::residual_add(&g1.input, &g_skip)
        }
        LayerKind::GlobalAvgpool => tensor::global_avgpool_backward(x.shape(), &grad),
        LayerKind::Flatten => reshape_like(grad, x.shape()),
        LayerKind::Fc { .. } => {
            let flat = reshape_like(x.clone(), &[x.len()])?;
            let (gx, gw, gb) = tensor::affine_backward(&flat, weights.get(index, "weight")?, &grad)?;
            accumulate(grads, key("weight"), &gw);
            accumulate(grads, key("bias"), &gb);
            reshape_like(gx, x.shape())
        }
    }
}

/// Cross-entropy of the classifier output on one sample and the gradient of
/// every backbone parameter.
pub fn backbone_gradients<T: Scalar>(
    net: &NetworkSpec,
    weights: &WeightStore<T>,
    x: &Tensor<T>,
    label: usize,
) -> Result<(f64, Gradients)> {
    let mut inputs = Vec::with_capacity(net.layers().len());
    let mut current = x.clone();
    for index in 0..net.layers().len() {
        let next = apply_layer(net, index, weights, &current)?;
        inputs.push(current);
        current = next;
    }
    let (loss, g) = cross_entropy_logits(current.data(), label)?;
    let mut grad = Tensor::new(current.shape().to_vec(), g.into_iter().map(T::narrow).collect())?;
    let mut grads = Gradients::new();
    for index in (0..net.layers().len()).rev() {
        grad = layer_backward(net, index, weights, &inputs[index], grad, &mut grads)?;
    }
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGradients {
    pub codebook: Vec<f64>,
    pub fc_weight: Vec<f64>,
    pub fc_bias: Vec<f64>,
}

/// Softmax cross-entropy of one head's output and its parameter gradients.
pub fn head_gradients<T: Scalar>(head: &ExitHead<T>, y: &Tensor<T>, label: usize) -> Result<(f64, HeadGradients)> {
    let pooled = bof_pool(y, &head.codebook, head.sigma)?;
    let logits = tensor::affine(&pooled, &head.fc_weight, &head.fc_bias)?;
    let (loss, gz) = cross_entropy_logits(logits.data(), label)?;
    let gz = Tensor::vector(gz.into_iter().map(T::narrow).collect())?;
    let (g_pooled, gw, gb) = tensor::affine_backward(&pooled, &head.fc_weight, &gz)?;
    let g_pooled: Vec<f64> = g_pooled.data().iter().map(|v| v.widen()).collect();
    let gc = bof_pool_backward(y, &head.codebook, head.sigma, &g_pooled)?;
    let widen = |t: &Tensor<T>| t.data().iter().map(|v| v.widen()).collect();
    Ok((
        loss,
        HeadGradients {
            codebook: widen(&gc),
            fc_weight: widen(&gw),
            fc_bias: widen(&gb),
        },
    ))
}
