//! Network building blocks and the assembled deraining network.

mod attention;
mod config;
mod fusion;
mod hourglass;
mod layers;
mod net;

pub use attention::{
    channel_attention, channel_gates, hadb_forward, spatial_attention, spatial_mask,
    ChannelAttentionParams, HadbParams, SpatialAttentionParams,
};
pub use config::{FusionMode, ModelConfig, DCR_DENSE_LAYERS, LEAKY_SLOPE, SPATIAL_KERNEL};
pub use fusion::{fuse, fuse_baseline, rpf_fuse, rpf_residual, FusionParams, RpfParams};
pub use hourglass::{
    dcr_forward, downsample, mheb_forward, nearest_upsample, shg_forward, DcrParams, MhebParams,
};
pub use layers::ConvParams;
pub use net::{
    conv_head, crop, param_count, reflect_pad, validate_image, DistillParams, Mh2fNet, NetLayout,
};
