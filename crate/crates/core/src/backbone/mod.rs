//! Backbone layer graph, op accounting and the forward pass that exposes
//! every exit-eligible intermediate result.
//!
//! Exit points are addressed by 1-based *positions* `1..=L_total`; position
//! `p` is the output of layer `exit_eligible[p - 1]`.

mod forward;
mod manifest;
mod reference;
mod weights;

pub(crate) use forward::apply_layer;
pub use forward::{forward_collect, forward_until, Collected, Forward};
pub use manifest::{load_model, save_model, MANIFEST_VERSION};
pub use reference::{reference_network, residual_network};
pub use weights::{ParamKey, WeightStore};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "kebab-case")]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    Maxpool {
        k: usize,
        stride: usize,
    },
    /// `relu(conv3x3(relu(conv3x3_s(x))) + skip(x))`, where `skip` is the
    /// identity or a strided 1x1 projection when the shape changes.
    ResidualBlock {
        out_channels: usize,
        stride: usize,
    },
    GlobalAvgpool,
    Flatten,
    Fc {
        out_features: usize,
    },
}

impl LayerKind {
    /// Learnable parameter roles this layer owns, given its input shape.
    pub fn param_roles(&self, input: &[usize]) -> Vec<&'static str> {
        match *self {
            LayerKind::Conv { .. } => vec!["kernel", "bias"],
            LayerKind::Fc { .. } => vec!["weight", "bias"],
            LayerKind::ResidualBlock { out_channels, stride } => {
                let mut roles = vec!["conv1.kernel", "conv1.bias", "conv2.kernel", "conv2.bias"];
                if needs_projection(input, out_channels, stride) {
                    roles.extend(["proj.kernel", "proj.bias"]);
                }
                roles
            }
            _ => vec![],
        }
    }

    /// Expected shape of a parameter tensor.
    pub fn param_shape(&self, role: &str, input: &[usize]) -> Option<Vec<usize>> {
        let c_in = input.first().copied().unwrap_or(0);
        match (*self, role) {
            (
                LayerKind::Conv {
                    out_channels, kernel, ..
                },
                "kernel",
            ) => Some(vec![out_channels, c_in, kernel, kernel]),
            (LayerKind::Conv { out_channels, .. }, "bias") => Some(vec![out_channels]),
            (LayerKind::Fc { out_features }, "weight") => Some(vec![out_features, input.iter().product()]),
            (LayerKind::Fc { out_features }, "bias") => Some(vec![out_features]),
            (LayerKind::ResidualBlock { out_channels: o, .. }, "conv1.kernel") => Some(vec![o, c_in, 3, 3]),
            (LayerKind::ResidualBlock { out_channels: o, .. }, "conv2.kernel") => Some(vec![o, o, 3, 3]),
            (LayerKind::ResidualBlock { out_channels: o, .. }, "proj.kernel") => Some(vec![o, c_in, 1, 1]),
            (LayerKind::ResidualBlock { out_channels: o, .. }, "conv1.bias" | "conv2.bias" | "proj.bias") => {
                Some(vec![o])
            }
            _ => None,
        }
    }

    fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |op: &'static str| -> Result<(usize, usize, usize)> {
            match input {
                &[c, h, w] => Ok((c, h, w)),
                _ => Err(Error::shape(op, format!("layer {index} input rank"), 3, input.len())),
            }
        };
        match *self {
            LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                let (_, h, w) = spatial("conv")?;
                if kernel % 2 == 0 || stride == 0 || out_channels == 0 {
                    return Err(Error::invalid(
                        "conv",
                        format!("layer {index}: bad parameters {self:?}"),
                    ));
                }
                if h + 2 * pad < kernel || w + 2 * pad < kernel {
                    return Err(Error::shape(
                        "conv",
                        format!("layer {index} spatial extent"),
                        kernel,
                        h.min(w) + 2 * pad,
                    ));
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * pad - kernel) / stride + 1,
                    (w + 2 * pad - kernel) / stride + 1,
                ])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::Maxpool { k, stride } => {
                let (c, h, w) = spatial("maxpool")?;
                if k == 0 || stride == 0 || k > h || k > w {
                    return Err(Error::invalid(
                        "maxpool",
                        format!("layer {index}: window {k} on {h}x{w}"),
                    ));
                }
                Ok(vec![c, (h - k) / stride + 1, (w - k) / stride + 1])
            }
            LayerKind::ResidualBlock { out_channels, stride } => {
                let (_, h, w) = spatial("residual-block")?;
                if stride == 0 || out_channels == 0 {
                    return Err(Error::invalid(
                        "residual-block",
                        format!("layer {index}: bad parameters"),
                    ));
                }
                Ok(vec![out_channels, (h - 1) / stride + 1, (w - 1) / stride + 1])
            }
            LayerKind::GlobalAvgpool => {
                let (c, _, _) = spatial("global-avgpool")?;
                Ok(vec![c])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::Fc { out_features } => {
                if input.len() != 1 {
                    return Err(Error::shape("fc", format!("layer {index} input rank"), 1, input.len()));
                }
                Ok(vec![out_features])
            }
        }
    }

    /// Multiply-accumulate count for one evaluation of this layer.
    fn op_count(&self, input: &[usize], output: &[usize]) -> u64 {
        let out_spatial = || (output[1] * output[2]) as u64;
        match *self {
            LayerKind::Conv {
                out_channels, kernel, ..
            } => (out_channels * input[0] * kernel * kernel) as u64 * out_spatial(),
            LayerKind::ResidualBlock { out_channels, stride } => {
                let o = out_channels as u64;
                let c = input[0] as u64;
                let mut macs = o * c * 9 * out_spatial() + o * o * 9 * out_spatial();
                if needs_projection(input, out_channels, stride) {
                    macs += o * c * out_spatial();
                }
                macs
            }
            LayerKind::GlobalAvgpool => input.iter().product::<usize>() as u64,
            LayerKind::Fc { out_features } => (out_features * input[0]) as u64,
            LayerKind::Relu | LayerKind::Maxpool { .. } | LayerKind::Flatten => 0,
        }
    }
}

pub(crate) fn needs_projection(input: &[usize], out_channels: usize, stride: usize) -> bool {
    input[0] != out_channels || stride != 1
}

/// One layer of the backbone with its resolved shapes and MAC count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub op_count: u64,
}

/// Sequential backbone with designated exit-eligible layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<LayerSpec>,
    exit_eligible: Vec<usize>,
}

impl NetworkSpec {
    /// Resolves shapes and op counts. With `exit_eligible == None` the exit
    /// points are the activated outputs of every conv layer (the following
    /// relu when there is one) and every residual block.
    pub fn new(
        input_shape: Vec<usize>,
        num_classes: usize,
        kinds: Vec<LayerKind>,
        exit_eligible: Option<Vec<usize>>,
    ) -> Result<Self> {
        if input_shape.len() != 3 || input_shape.contains(&0) {
            return Err(Error::invalid(
                "network",
                format!("input shape {input_shape:?} must be [C, H, W]"),
            ));
        }
        if num_classes < 2 {
            return Err(Error::invalid("network", "num_classes must be at least 2"));
        }
        let mut layers = Vec::with_capacity(kinds.len());
        let mut shape = input_shape.clone();
        for (index, kind) in kinds.iter().enumerate() {
            let output_shape = kind.output_shape(index, &shape)?;
            let op_count = kind.op_count(&shape, &output_shape);
            layers.push(LayerSpec {
                kind: *kind,
                input_shape: std::mem::replace(&mut shape, output_shape.clone()),
                output_shape,
                op_count,
            });
        }
        if shape != [num_classes] {
            return Err(Error::shape(
                "network",
                "final output",
                format!("[{num_classes}]"),
                format!("{shape:?}"),
            ));
        }
        let exit_eligible = exit_eligible.unwrap_or_else(|| default_exits(&kinds));
        if exit_eligible.len() < 2 {
            return Err(Error::invalid(
                "network",
                format!("need at least 2 exit-eligible layers, got {}", exit_eligible.len()),
            ));
        }
        for pair in exit_eligible.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::invalid(
                    "network",
                    "exit-eligible indices must be strictly increasing",
                ));
            }
        }
        for &i in &exit_eligible {
            match layers.get(i) {
                Some(l) if l.output_shape.len() == 3 => {}
                Some(_) => {
                    return Err(Error::invalid(
                        "network",
                        format!("exit layer {i} does not produce a [C, H, W] map"),
                    ))
                }
                None => return Err(Error::invalid("network", format!("exit layer {i} out of range"))),
            }
        }
        Ok(Self {
            input_shape,
            num_classes,
            layers,
            exit_eligible,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(|l| l.kind).collect()
    }

    pub fn exit_eligible(&self) -> &[usize] {
        &self.exit_eligible
    }

    /// Number of exit-eligible layers (`L_total`).
    pub fn l_total(&self) -> usize {
        self.exit_eligible.len()
    }

    /// Layer index backing a 1-based exit position.
    pub fn layer_at(&self, position: usize) -> Result<usize> {
        if position == 0 || position > self.l_total() {
            return Err(Error::invalid(
                "network",
                format!("exit position {position} outside 1..={}", self.l_total()),
            ));
        }
        Ok(self.exit_eligible[position - 1])
    }

    /// `[C, H, W]` shape of the intermediate result at an exit position.
    pub fn exit_shape(&self, position: usize) -> Result<&[usize]> {
        Ok(&self.layers[self.layer_at(position)?].output_shape)
    }

    /// MACs of one full classic forward pass.
    pub fn total_ops(&self) -> u64 {
        self.layers.iter().map(|l| l.op_count).sum()
    }

    /// Cumulative MACs up to each exit position. The final entry also covers
    /// the classifier tail, so it equals [`NetworkSpec::total_ops`].
    pub fn op_counts(&self) -> Vec<u64> {
        let mut out = Vec::with_capacity(self.l_total());
        let mut acc = 0u64;
        let mut next = 0;
        for &exit in &self.exit_eligible {
            while next <= exit {
                acc += self.layers[next].op_count;
                next += 1;
            }
            out.push(acc);
        }
        *out.last_mut().unwrap() = self.total_ops();
        out
    }
}

/// Cumulative op counts per exit position; see [`NetworkSpec::op_counts`].
pub fn op_counts(net: &NetworkSpec) -> Vec<u64> {
    net.op_counts()
}

fn default_exits(kinds: &[LayerKind]) -> Vec<usize> {
    let mut exits = Vec::new();
    for (i, kind) in kinds.iter().enumerate() {
        match kind {
            LayerKind::Conv { .. } => {
                if matches!(kinds.get(i + 1), Some(LayerKind::Relu)) {
                    exits.push(i + 1);
                } else {
                    exits.push(i);
                }
            }
            LayerKind::ResidualBlock { .. } => exits.push(i),
            _ => {}
        }
    }
    exits
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(out: usize) -> LayerKind {
        LayerKind::Conv {
            out_channels: out,
            kernel: 3,
            stride: 1,
            pad: 1,
        }
    }

    #[test]
    fn reference_net_counts() {
        let net = reference_network();
        assert_eq!(net.l_total(), 8);
        assert_eq!(net.num_classes(), 4);
        let counts = net.op_counts();
        // conv1: C_out * C_in * kH * kW * H' * W'
        assert_eq!(counts[0], 8 * 3 * 9 * 32 * 32);
        assert_eq!(counts[1] - counts[0], 8 * 8 * 9 * 32 * 32);
        assert_eq!(*counts.last().unwrap(), net.total_ops());
        assert!(counts.windows(2).all(|w| w[0] < w[1]));
        let normalized = *counts.last().unwrap() as f64 / net.total_ops() as f64;
        assert_eq!(normalized, 1.0);
    }

    #[test]
    fn reference_totals_match_hand_formulas() {
        let per_conv = [
            (3, 8, 32),
            (8, 8, 32),
            (8, 16, 16),
            (16, 16, 16),
            (16, 32, 8),
            (32, 32, 8),
            (32, 64, 4),
            (64, 64, 4),
        ];
        let convs: u64 = per_conv.iter().map(|&(ci, co, s)| (ci * co * 9 * s * s) as u64).sum();
        let tail = 64 * 4 * 4 + 4 * 64;
        assert_eq!(reference_network().total_ops(), convs + tail as u64);
    }

    #[test]
    fn identical_convs_have_equal_increments() {
        let kinds = vec![
            conv(4),
            LayerKind::Relu,
            conv(4),
            LayerKind::Relu,
            conv(4),
            LayerKind::Relu,
            LayerKind::GlobalAvgpool,
            LayerKind::Fc { out_features: 2 },
        ];
        let net = NetworkSpec::new(vec![4, 6, 6], 2, kinds, None).unwrap();
        let c = net.op_counts();
        assert_eq!(net.exit_eligible(), &[1, 3, 5]);
        assert_eq!(c[1] - c[0], c[0]);
    }

    #[test]
    fn rejects_bad_graphs() {
        let tail = [LayerKind::GlobalAvgpool, LayerKind::Fc { out_features: 3 }];
        let one_exit = [vec![conv(2)], tail.to_vec()].concat();
        assert!(NetworkSpec::new(vec![1, 4, 4], 3, one_exit.clone(), None).is_err());
        let two = [vec![conv(2), conv(2)], tail.to_vec()].concat();
        assert!(NetworkSpec::new(vec![1, 4, 4], 3, two.clone(), Some(vec![1, 0])).is_err());
        assert!(NetworkSpec::new(vec![1, 4, 4], 3, two.clone(), Some(vec![0, 9])).is_err());
        assert!(NetworkSpec::new(vec![1, 4, 4], 3, two.clone(), Some(vec![0, 2])).is_err());
        assert!(NetworkSpec::new(vec![1, 4, 4], 4, two, None).is_err());
    }

    #[test]
    fn residual_block_counts_projection() {
        let net = residual_network();
        let first = &net.layers()[2];
        assert!(matches!(first.kind, LayerKind::ResidualBlock { .. }));
        let with_proj = &net.layers()[3];
        let (o, c) = (with_proj.output_shape[0] as u64, with_proj.input_shape[0] as u64);
        let s = (with_proj.output_shape[1] * with_proj.output_shape[2]) as u64;
        assert_eq!(with_proj.op_count, o * c * 9 * s + o * o * 9 * s + o * c * s);
    }

    #[test]
    fn layer_kind_serializes_kind_and_params() {
        let j = serde_json::to_value(conv(8)).unwrap();
        assert_eq!(j["kind"], "conv");
        assert_eq!(j["params"]["out_channels"], 8);
        let r: LayerKind = serde_json::from_str(r#"{"kind":"relu"}"#).unwrap();
        assert_eq!(r, LayerKind::Relu);
        let b: LayerKind =
            serde_json::from_str(r#"{"kind":"residual-block","params":{"out_channels":4,"stride":2}}"#).unwrap();
        assert_eq!(
            b,
            LayerKind::ResidualBlock {
                out_channels: 4,
                stride: 2
            }
        );
    }
}
