//! Minimal convolutional network library with exact backpropagation.
//!
//! A [`Network`] is a list of named [`Stage`]s followed by global average
//! pooling and a linear head. Stage outputs flagged `hookable` form the
//! layer registry exposed to CAM methods.

mod build;
mod layers;
mod network;

pub use build::{build_architecture, reference_network, reference_network_with, resnet, Init, REFERENCE_CHANNELS};
pub use layers::{
    backward_seq, forward_seq, forward_seq_cached, BatchNorm2d, Cache, Conv2d, Layer, Linear, MaxPool2d,
    ParamMut, ParamRef, Residual,
};
pub use network::{global_avg_pool, Architecture, InputSpec, Network, Stage, Trace};
