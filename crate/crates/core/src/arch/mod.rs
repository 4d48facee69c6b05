//! The MC-UNet architecture: bottleneck modules and the three-level U-shape.

mod blocks;
mod config;
mod model;

pub use blocks::{
    dac, fuse, mkp, spatial_attention, Attention, ConvParams, DacParams, ATTENTION_KERNEL,
};
pub use config::{DropBlockConfig, FusionMode, NetworkConfig, LEVELS};
pub use model::{
    dac_parameter_total, fusion_parameter_total, mkp_parameter_total, parameter_layout, Bindings,
    ForwardOptions, ForwardOutput, Init, Model, ParamSpec, ParamStore,
};
