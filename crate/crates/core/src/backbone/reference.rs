use super::{LayerKind, NetworkSpec};

fn conv3(out_channels: usize) -> LayerKind {
    LayerKind::Conv {
        out_channels,
        kernel: 3,
        stride: 1,
        pad: 1,
    }
}

/// Desk-scale VGG-style backbone: eight 3x3 convs (8-8-16-16-32-32-64-64),
/// maxpool after conv 2/4/6, global average pool and a 4-way classifier on
/// `3x32x32` inputs. Exits sit on the eight activated conv outputs.
pub fn reference_network() -> NetworkSpec {
    let mut kinds = Vec::new();
    for (i, c) in [8, 8, 16, 16, 32, 32, 64, 64].into_iter().enumerate() {
        kinds.push(conv3(c));
        kinds.push(LayerKind::Relu);
        if matches!(i, 1 | 3 | 5) {
            kinds.push(LayerKind::Maxpool { k: 2, stride: 2 });
        }
    }
    kinds.push(LayerKind::GlobalAvgpool);
    kinds.push(LayerKind::Fc { out_features: 4 });
    NetworkSpec::new(vec![3, 32, 32], 4, kinds, None).expect("reference network is well-formed")
}

/// Small ResNet-style backbone (stem conv + four residual blocks) used to
/// exercise the residual path; exits sit on every block output.
pub fn residual_network() -> NetworkSpec {
    let kinds = vec![
        conv3(8),
        LayerKind::Relu,
        LayerKind::ResidualBlock {
            out_channels: 8,
            stride: 1,
        },
        LayerKind::ResidualBlock {
            out_channels: 16,
            stride: 2,
        },
        LayerKind::ResidualBlock {
            out_channels: 16,
            stride: 1,
        },
        LayerKind::ResidualBlock {
            out_channels: 32,
            stride: 2,
        },
        LayerKind::GlobalAvgpool,
        LayerKind::Flatten,
        LayerKind::Fc { out_features: 4 },
    ];
    NetworkSpec::new(vec![3, 16, 16], 4, kinds, None).expect("residual network is well-formed")
}
