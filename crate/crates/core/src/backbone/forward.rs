use super::{needs_projection, LayerKind, NetworkSpec, WeightStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Evaluates layer `index` of `net` on `x`.
pub(crate) fn apply_layer<T: Scalar>(
    net: &NetworkSpec,
    index: usize,
    weights: &WeightStore<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let layer = &net.layers()[index];
    match layer.kind {
        LayerKind::Conv { stride, pad, .. } => tensor::conv2d(
            x,
            weights.get(index, "kernel")?,
            weights.get(index, "bias")?,
            stride,
            pad,
        ),
        LayerKind::Relu => Ok(tensor::relu(x)),
        LayerKind::Maxpool { k, stride } => tensor::maxpool2d(x, k, stride),
        LayerKind::ResidualBlock { out_channels, stride } => {
            let h = tensor::relu(&tensor::conv2d(
                x,
                weights.get(index, "conv1.kernel")?,
                weights.get(index, "conv1.bias")?,
                stride,
                1,
            )?);
            let h = tensor::conv2d(
                &h,
                weights.get(index, "conv2.kernel")?,
                weights.get(index, "conv2.bias")?,
                1,
                1,
            )?;
            let sum = if needs_projection(x.shape(), out_channels, stride) {
                let skip = tensor::conv2d(
                    x,
                    weights.get(index, "proj.kernel")?,
                    weights.get(index, "proj.bias")?,
                    stride,
                    0,
                )?;
                tensor::residual_add(&h, &skip)?
            } else {
                tensor::residual_add(&h, x)?
            };
            Ok(tensor::relu(&sum))
        }
        LayerKind::GlobalAvgpool => tensor::global_avgpool(x),
        LayerKind::Flatten => {
            let n = x.len();
            x.clone().reshape(vec![n])
        }
        LayerKind::Fc { .. } => tensor::affine(x, weights.get(index, "weight")?, weights.get(index, "bias")?),
    }
}

/// Incremental forward pass that stops at exit positions on request.
pub struct Forward<'a, T> {
    net: &'a NetworkSpec,
    weights: &'a WeightStore<T>,
    current: Tensor<T>,
    next_layer: usize,
    ops: u64,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(net: &'a NetworkSpec, weights: &'a WeightStore<T>, input: Tensor<T>) -> Result<Self> {
        if input.shape() != net.input_shape() {
            return Err(Error::shape(
                "forward",
                "input",
                format!("{:?}", net.input_shape()),
                format!("{:?}", input.shape()),
            ));
        }
        Ok(Self {
            net,
            weights,
            current: input,
            next_layer: 0,
            ops: 0,
        })
    }

    /// MACs executed so far.
    pub fn ops(&self) -> u64 {
        self.ops
    }

    /// Index of the next layer to run.
    pub fn next_layer(&self) -> usize {
        self.next_layer
    }

    fn step(&mut self) -> Result<()> {
        self.current = apply_layer(self.net, self.next_layer, self.weights, &self.current)?;
        self.ops += self.net.layers()[self.next_layer].op_count;
        self.next_layer += 1;
        Ok(())
    }

    /// Runs layers until the output of exit `position` is available.
    pub fn advance_to(&mut self, position: usize) -> Result<&Tensor<T>> {
        let target = self.net.layer_at(position)?;
        if target + 1 < self.next_layer {
            return Err(Error::invalid(
                "forward",
                format!("exit position {position} already passed"),
            ));
        }
        while self.next_layer <= target {
            self.step()?;
        }
        Ok(&self.current)
    }

    /// Runs the remaining layers and returns the classifier logits.
    pub fn finish(mut self) -> Result<Tensor<T>> {
        while self.next_layer < self.net.layers().len() {
            self.step()?;
        }
        Ok(self.current)
    }

    pub fn finish_with_ops(mut self) -> Result<(Tensor<T>, u64)> {
        while self.next_layer < self.net.layers().len() {
            self.step()?;
        }
        Ok((self.current, self.ops))
    }
}

#[derive(Clone, Debug)]
pub struct Collected<T> {
    /// `(layer index, y_i)` for every exit-eligible layer, in order.
    pub intermediates: Vec<(usize, Tensor<T>)>,
    pub logits: Tensor<T>,
}

pub fn forward_collect<T: Scalar>(net: &NetworkSpec, weights: &WeightStore<T>, x: Tensor<T>) -> Result<Collected<T>> {
    let mut fwd = Forward::new(net, weights, x)?;
    let mut intermediates = Vec::with_capacity(net.l_total());
    for position in 1..=net.l_total() {
        let y = fwd.advance_to(position)?.clone();
        intermediates.push((net.exit_eligible()[position - 1], y));
    }
    Ok(Collected {
        intermediates,
        logits: fwd.finish()?,
    })
}

/// Runs layers up to exit `position` only; returns `y` there and the MACs spent.
pub fn forward_until<T: Scalar>(
    net: &NetworkSpec,
    weights: &WeightStore<T>,
    x: Tensor<T>,
    position: usize,
) -> Result<(Tensor<T>, u64)> {
    net.layer_at(position)?;
    let mut fwd = Forward::new(net, weights, x)?;
    fwd.advance_to(position)?;
    let ops = fwd.ops();
    Ok((fwd.current, ops))
}
