//! Channel and spatial attention gates and the hierarchical attentive
//! distillation block built from them.

use crate::error::{Error, Result};
use crate::ops::Ops;
use crate::params::{ParamBuilder, ParamId};
use crate::tensor::Scalar;

use super::config::SPATIAL_KERNEL;
use super::layers::{act, ConvParams};

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttentionParams {
    pub channels: usize,
    pub reduction: usize,
    /// Shared bottleneck `C -> C/r -> C`, applied as 1×1 convolutions.
    pub squeeze: ConvParams,
    pub excite: ConvParams,
}

impl ChannelAttentionParams {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = channels / reduction.max(1);
        b.scoped(name, |b| ChannelAttentionParams {
            channels,
            reduction,
            squeeze: ConvParams::build(b, "squeeze", channels, hidden.max(1), 1),
            excite: ConvParams::build(b, "excite", hidden.max(1), channels, 1),
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.squeeze.ids(), self.excite.ids()].concat()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttentionParams {
    /// `2 -> 1` convolution over the stacked mean and max maps.
    pub conv: ConvParams,
}

impl SpatialAttentionParams {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str) -> Self {
        SpatialAttentionParams {
            conv: ConvParams::build(b, name, 2, 1, SPATIAL_KERNEL),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.conv.ids().to_vec()
    }
}

/// Gates every pixel by `sigmoid(conv([mean_c(x), max_c(x)]))`.
pub fn spatial_attention<T: Scalar, O: Ops<T>>(ops: &mut O, x: &O::V, p: &SpatialAttentionParams) -> O::V {
    let mask = spatial_mask(ops, x, p);
    ops.mul(x, &mask)
}

/// The `[n, 1, h, w]` gate of [`spatial_attention`].
pub fn spatial_mask<T: Scalar, O: Ops<T>>(ops: &mut O, x: &O::V, p: &SpatialAttentionParams) -> O::V {
    let avg = ops.channel_mean(x);
    let max = ops.channel_max(x);
    let pooled = ops.concat(&[avg, max]);
    let logits = p.conv.apply(ops, &pooled);
    ops.sigmoid(&logits)
}

/// Gates every channel by `sigmoid(mlp(avgpool(x)) + mlp(maxpool(x)))`.
pub fn channel_attention<T: Scalar, O: Ops<T>>(
    ops: &mut O,
    x: &O::V,
    p: &ChannelAttentionParams,
) -> Result<O::V> {
    let c = ops.shape(x)[1];
    if c != p.channels {
        return Err(Error::Config(vec![format!(
            "channel attention: input has {c} channels, parameters expect {}",
            p.channels
        )]));
    }
    if p.reduction == 0 || c % p.reduction != 0 {
        return Err(Error::Config(vec![format!(
            "channel attention: {c} channels not divisible by reduction {}",
            p.reduction
        )]));
    }
    let gates = channel_gates(ops, x, p);
    Ok(ops.mul(x, &gates))
}

/// The `[n, c, 1, 1]` gate of [`channel_attention`].
pub fn channel_gates<T: Scalar, O: Ops<T>>(ops: &mut O, x: &O::V, p: &ChannelAttentionParams) -> O::V {
    let avg = ops.global_avg_pool(x);
    let max = ops.global_max_pool(x);
    let mlp = |ops: &mut O, v: &O::V| {
        let h = p.squeeze.apply(ops, v);
        let h = act(ops, &h);
        p.excite.apply(ops, &h)
    };
    let a = mlp(ops, &avg);
    let m = mlp(ops, &max);
    let sum = ops.add(&a, &m);
    ops.sigmoid(&sum)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HadbParams {
    /// Number of hierarchical features consumed.
    pub inputs: usize,
    pub channels: usize,
    /// 1×1 bottleneck `inputs·C -> C`.
    pub head: ConvParams,
    pub channel: ChannelAttentionParams,
    pub spatial: SpatialAttentionParams,
    /// 1×1 bottleneck `C -> C`.
    pub tail: ConvParams,
}

impl HadbParams {
    pub fn build<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        inputs: usize,
        channels: usize,
        reduction: usize,
    ) -> Self {
        b.scoped(name, |b| HadbParams {
            inputs,
            channels,
            head: ConvParams::build(b, "head", inputs * channels, channels, 1),
            channel: ChannelAttentionParams::build(b, "channel_att", channels, reduction),
            spatial: SpatialAttentionParams::build(b, "spatial_att"),
            tail: ConvParams::build(b, "tail", channels, channels, 1),
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [
            self.head.ids().to_vec(),
            self.channel.ids(),
            self.spatial.ids(),
            self.tail.ids().to_vec(),
        ]
        .concat()
    }
}

pub(crate) fn check_same_shapes<T: Scalar, O: Ops<T>>(ops: &O, xs: &[&O::V], what: &str) -> Result<()> {
    let first = ops.shape(xs[0]);
    for (i, x) in xs.iter().enumerate().skip(1) {
        let s = ops.shape(x);
        if s != first {
            return Err(Error::pre(format!(
                "{what}: input {i} has shape {s:?}, expected {first:?}"
            )));
        }
    }
    Ok(())
}

/// Concatenate the hierarchy, compress it with a 1×1 bottleneck, apply
/// channel then spatial attention and project with a second 1×1 bottleneck.
pub fn hadb_forward<T: Scalar, O: Ops<T>>(ops: &mut O, hierarchy: &[O::V], p: &HadbParams) -> Result<O::V> {
    if hierarchy.is_empty() {
        return Err(Error::pre("distillation needs at least one hierarchical feature"));
    }
    let refs: Vec<&O::V> = hierarchy.iter().collect();
    check_same_shapes(ops, &refs, "hadb")?;
    if hierarchy.len() != p.inputs || ops.shape(&hierarchy[0])[1] != p.channels {
        return Err(Error::Config(vec![format!(
            "hadb: parameters expect {} features of {} channels, got {} of {}",
            p.inputs,
            p.channels,
            hierarchy.len(),
            ops.shape(&hierarchy[0])[1]
        )]));
    }
    let cat = if hierarchy.len() == 1 {
        hierarchy[0].clone()
    } else {
        ops.concat(hierarchy)
    };
    let h = p.head.apply(ops, &cat);
    let h = channel_attention(ops, &h, &p.channel)?;
    let h = spatial_attention(ops, &h, &p.spatial);
    Ok(p.tail.apply(ops, &h))
}
