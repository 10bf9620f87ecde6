//! Weakly-supervised tumor segmentation from image-level classifiers.
//!
//! This crate holds the pure algorithmic core and needs only `alloc`:
//!
//! * [`nn`] and [`adapter`]: a small convolutional network library with
//!   exact backpropagation, and the uniform classifier interface the CAM
//!   methods consume (logits, named-layer activations, class gradients).
//! * [`cam`]: Grad-CAM, ScoreCAM, LayerCAM and the confidence-weighted
//!   Cfd-CAM (with its logit-weighted ablation variant).
//! * [`multiscale`]: CAM at several input scales, fused per pixel.
//! * [`metrics`]: binarization, Dice, IoU and HD95 with brute-force oracles.
//! * [`data`]: slicing, labels, case-level splits and the synthetic blob set.
//! * [`train`]: SupCon pretraining and cross-entropy fine-tuning with Adam
//!   and a cosine learning-rate schedule.
//!
//! File formats, the command line and reporting live in the `cfdcam` crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod adapter;
pub mod cam;
pub mod data;
mod error;
pub(crate) mod exec;
pub(crate) mod math;
pub mod metrics;
pub mod multiscale;
pub mod nn;
pub mod tensor;
pub mod train;

pub use adapter::{
    ActivationStack, ClassifierHandle, GradientStack, LogitVector, Mode, central_difference,
};
pub use cam::{CamMethod, CamRequest, ChannelWeights, SaliencyMap, Weighting, WeightingKind};
pub use error::{Error, Result};
pub use metrics::{BinaryMask, MetricTriple, SummaryStat};
pub use multiscale::{Fusion, ScaleSpec};
pub use nn::{reference_network, Architecture, InputSpec, Network};
pub use tensor::{ImageTensor, Map2, Tensor3};
