//! Parameterized layers on top of the tape: conv/normalization layers,
//! residual blocks, the dilated encoder and the pyramid pooling head.

pub mod checkpoint;
mod layers;
mod params;

pub use layers::{
    scaled_aspp_rates, Activation, Aspp, BatchNorm, ConvLayer, ConvOpts, Encoder, EncoderStage,
    ResidualBlock, ASPP_BASE_RATES, BN_EPS, BN_MOMENTUM, STAGE_STRIDES,
};
pub use params::{Forward, Mode, ParamId, ParamStore, StatUpdate};
