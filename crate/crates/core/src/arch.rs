//! Layer stacks shared by the spiking network, the CNN baseline, the energy
//! model and the checkpoint format.

use rand::Rng as _;

use crate::error::{shape_err, Result};
use crate::kernels::ConvSpec;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Block {
    /// Convolution followed by normalization and the activation.
    Conv {
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
    },
    AvgPool { window: usize },
    /// Fully connected layer followed by normalization and the activation.
    Dense { out_features: usize },
}

impl Block {
    pub fn conv3x3(out_channels: usize) -> Self {
        Block::Conv {
            out_channels,
            kernel_size: 3,
            stride: 1,
            padding: 1,
        }
    }
}

/// Hidden blocks plus an implicit fully connected output head with
/// `num_classes` units.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub in_channels: usize,
    pub input_side: usize,
    pub blocks: Vec<Block>,
    pub num_classes: usize,
}

impl Architecture {
    /// Conv32 · Conv32 · AP2 · Conv64 · AP2 · FC128 · FC(classes).
    pub fn reference(in_channels: usize, input_side: usize, num_classes: usize) -> Self {
        Self {
            in_channels,
            input_side,
            blocks: vec![
                Block::conv3x3(32),
                Block::conv3x3(32),
                Block::AvgPool { window: 2 },
                Block::conv3x3(64),
                Block::AvgPool { window: 2 },
                Block::Dense { out_features: 128 },
            ],
            num_classes,
        }
    }

    /// Walks the stack, checking every shape and naming every layer.
    pub fn resolve(&self) -> Result<Vec<ResolvedLayer>> {
        if self.in_channels == 0 || self.input_side == 0 || self.num_classes == 0 {
            return Err(shape_err("architecture needs positive channels, side and classes"));
        }
        let (mut conv_n, mut bn_n, mut pool_n, mut fc_n) = (0, 0, 0, 0);
        let mut channels = self.in_channels;
        let mut side = self.input_side;
        let mut features: Option<usize> = None;
        let mut out = Vec::with_capacity(self.blocks.len() + 1);
        for block in &self.blocks {
            match *block {
                Block::Conv {
                    out_channels,
                    kernel_size,
                    stride,
                    padding,
                } => {
                    if features.is_some() {
                        return Err(shape_err("convolution after a dense layer"));
                    }
                    let spec = ConvSpec {
                        in_channels: channels,
                        out_channels,
                        kernel_size,
                        stride,
                        padding,
                    };
                    let out_side = spec.output_side(side)?;
                    conv_n += 1;
                    bn_n += 1;
                    out.push(ResolvedLayer::Conv {
                        index: conv_n,
                        bn_index: bn_n,
                        spec,
                        in_side: side,
                        out_side,
                    });
                    channels = out_channels;
                    side = out_side;
                }
                Block::AvgPool { window } => {
                    if features.is_some() {
                        return Err(shape_err("pooling after a dense layer"));
                    }
                    if window == 0 || !side.is_multiple_of(window) {
                        return Err(shape_err(format!("pool window {window} does not tile side {side}")));
                    }
                    pool_n += 1;
                    out.push(ResolvedLayer::AvgPool {
                        index: pool_n,
                        channels,
                        in_side: side,
                        window,
                    });
                    side /= window;
                }
                Block::Dense { out_features } => {
                    if out_features == 0 {
                        return Err(shape_err("dense layer needs at least one unit"));
                    }
                    let in_features = features.unwrap_or(channels * side * side);
                    fc_n += 1;
                    bn_n += 1;
                    out.push(ResolvedLayer::Dense {
                        index: fc_n,
                        bn_index: bn_n,
                        in_features,
                        out_features,
                    });
                    features = Some(out_features);
                }
            }
        }
        out.push(ResolvedLayer::Head {
            index: fc_n + 1,
            in_features: features.unwrap_or(channels * side * side),
            out_features: self.num_classes,
        });
        Ok(out)
    }

    /// Number of normalized, activated layers (spiking layers in the SNN).
    pub fn activated_layers(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| !matches!(b, Block::AvgPool { .. }))
            .count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ResolvedLayer {
    Conv {
        index: usize,
        bn_index: usize,
        spec: ConvSpec,
        in_side: usize,
        out_side: usize,
    },
    AvgPool {
        index: usize,
        channels: usize,
        in_side: usize,
        window: usize,
    },
    Dense {
        index: usize,
        bn_index: usize,
        in_features: usize,
        out_features: usize,
    },
    Head {
        index: usize,
        in_features: usize,
        out_features: usize,
    },
}

impl ResolvedLayer {
    /// Parameter-name prefix: `conv1`, `pool1`, `fc1`, ...
    pub fn prefix(&self) -> String {
        match self {
            ResolvedLayer::Conv { index, .. } => format!("conv{index}"),
            ResolvedLayer::AvgPool { index, .. } => format!("pool{index}"),
            ResolvedLayer::Dense { index, .. } | ResolvedLayer::Head { index, .. } => format!("fc{index}"),
        }
    }

    pub fn bn_prefix(&self) -> Option<String> {
        match self {
            ResolvedLayer::Conv { bn_index, .. } | ResolvedLayer::Dense { bn_index, .. } => Some(format!("bn{bn_index}")),
            _ => None,
        }
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self {
            ResolvedLayer::Conv { spec, .. } => Some(spec.weight_shape().to_vec()),
            ResolvedLayer::Dense {
                in_features,
                out_features,
                ..
            }
            | ResolvedLayer::Head {
                in_features,
                out_features,
                ..
            } => Some(vec![*out_features, *in_features]),
            ResolvedLayer::AvgPool { .. } => None,
        }
    }

    /// Channel (feature) count seen by this layer's normalization.
    pub fn norm_channels(&self) -> Option<usize> {
        match self {
            ResolvedLayer::Conv { spec, .. } => Some(spec.out_channels),
            ResolvedLayer::Dense { out_features, .. } => Some(*out_features),
            _ => None,
        }
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Real>(shape: &[usize], rng: &mut Rng) -> Tensor<R> {
    let receptive: usize = shape[2..].iter().product();
    let fan_out = shape[0] * receptive;
    let fan_in = shape[1] * receptive;
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| R::of(rng.random_range(-limit..limit)))
}
