use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Shape;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const PIXEL_NORM_EPS: f64 = 1e-8;

/// One layer of a [`NetGraph`](super::NetGraph). Weights of convolutions and
/// linear layers come first in the parameter buffer, then the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// Cubic 3D convolution; weight layout `[out][in][kd][kh][kw]`.
    Conv3d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Nearest-neighbour upsampling by an integer factor on all spatial axes.
    Upsample { factor: usize },
    /// Per-channel normalisation over the spatial axes, no affine parameters.
    InstanceNorm { channels: usize },
    /// Per-voxel normalisation across channels.
    PixelNorm,
    LeakyRelu,
    Tanh,
    Sigmoid,
    /// Dense layer on the flattened input; weight layout `[out][in]`.
    Linear { in_features: usize, out: Shape },
    GlobalAvgPool,
}

fn conv_out(n: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    (n + 2 * padding)
        .checked_sub(kernel)
        .map(|v| v / stride + 1)
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv3d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// Closed-form learnable parameter count.
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => in_channels * out_channels * kernel.pow(3) + out_channels,
            LayerSpec::Linear { in_features, out } => in_features * out.numel() + out.numel(),
            _ => 0,
        }
    }

    /// Number of weight (non-bias) parameters.
    pub fn weight_count(&self) -> usize {
        match *self {
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => in_channels * out_channels * kernel.pow(3),
            LayerSpec::Linear { in_features, out } => in_features * out.numel(),
            _ => 0,
        }
    }

    /// Tensor dimensions of the weight, for checkpoint manifests.
    pub fn weight_dims(&self) -> Vec<usize> {
        match *self {
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![out_channels, in_channels, kernel, kernel, kernel],
            LayerSpec::Linear { in_features, out } => vec![out.numel(), in_features],
            _ => vec![],
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match *self {
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.c != in_channels {
                    return Err(Error::Graph(format!(
                        "conv expects {in_channels} channels, got {input}"
                    )));
                }
                let f = |n| conv_out(n, kernel, stride, padding);
                match (f(input.d), f(input.h), f(input.w)) {
                    (Some(d), Some(h), Some(w)) => Ok(Shape::new(out_channels, d, h, w)),
                    _ => Err(Error::Graph(format!(
                        "input {input} smaller than kernel {kernel}"
                    ))),
                }
            }
            LayerSpec::Upsample { factor } => Ok(Shape::new(
                input.c,
                input.d * factor,
                input.h * factor,
                input.w * factor,
            )),
            LayerSpec::InstanceNorm { channels } => {
                if input.c != channels {
                    return Err(Error::Graph(format!(
                        "norm expects {channels} channels, got {input}"
                    )));
                }
                Ok(input)
            }
            LayerSpec::Linear { in_features, out } => {
                if input.numel() != in_features {
                    return Err(Error::Graph(format!(
                        "linear expects {in_features} inputs, got {input}"
                    )));
                }
                Ok(out)
            }
            LayerSpec::GlobalAvgPool => Ok(Shape::vector(input.c)),
            LayerSpec::PixelNorm | LayerSpec::LeakyRelu | LayerSpec::Tanh | LayerSpec::Sigmoid => {
                Ok(input)
            }
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv3d { .. } => "conv3d",
            LayerSpec::Upsample { .. } => "resize",
            LayerSpec::InstanceNorm { .. } | LayerSpec::PixelNorm => "norm",
            LayerSpec::LeakyRelu | LayerSpec::Tanh | LayerSpec::Sigmoid => "nonlinearity",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::GlobalAvgPool => "pool",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_param_closed_form() {
        assert_eq!(LayerSpec::conv(1, 8, 3, 1, 1).param_count(), 224);
        assert_eq!(LayerSpec::conv(16, 32, 3, 2, 1).param_count(), 16 * 32 * 27 + 32);
        let lin = LayerSpec::Linear {
            in_features: 10,
            out: Shape::new(2, 2, 1, 1),
        };
        assert_eq!(lin.param_count(), 44);
        assert_eq!(LayerSpec::PixelNorm.param_count(), 0);
    }

    #[test]
    fn strided_conv_halves_even_extents() {
        let l = LayerSpec::conv(1, 4, 3, 2, 1);
        assert_eq!(
            l.output_shape(Shape::new(1, 16, 64, 64)).unwrap(),
            Shape::new(4, 8, 32, 32)
        );
        assert_eq!(l.output_shape(Shape::new(1, 1, 2, 2)).unwrap(), Shape::new(4, 1, 1, 1));
        assert!(l.output_shape(Shape::new(2, 4, 4, 4)).is_err());
    }
}
