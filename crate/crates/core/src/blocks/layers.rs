use crate::ops::Ops;
use crate::params::{ParamBuilder, ParamId};
use crate::tensor::Scalar;

use super::config::LEAKY_SLOPE;

/// Kernel and bias of one stride-1 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvParams {
    /// Square `kernel × kernel` convolution with "same" padding.
    pub fn build<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        b.scoped(name, |b| {
            let weight = b.uniform("weight", [out_channels, in_channels, kernel, kernel], fan_in);
            let bias = b.uniform("bias", [1, out_channels, 1, 1], fan_in);
            ConvParams {
                weight,
                bias,
                in_channels,
                out_channels,
                kernel,
                pad: kernel / 2,
            }
        })
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    pub fn apply<T: Scalar, O: Ops<T>>(&self, ops: &mut O, x: &O::V) -> O::V {
        let w = ops.param(self.weight);
        let b = ops.param(self.bias);
        ops.conv2d(x, &w, Some(&b), self.pad)
    }
}

pub(crate) fn act<T: Scalar, O: Ops<T>>(ops: &mut O, x: &O::V) -> O::V {
    ops.leaky_relu(x, T::from_f64_lossy(LEAKY_SLOPE))
}
