//! Class activation mapping.
//!
//! All four methods reduce an [`ActivationStack`](crate::ActivationStack)
//! to a map by `ReLU(Σ_k w_k A_k)`, upsample it to the image size and
//! min-max normalize. They differ only in the channel weights `w_k`:
//!
//! | method   | `w_k`                                                        |
//! |----------|--------------------------------------------------------------|
//! | Grad-CAM | spatial mean of ∂logit_c/∂A_k                                |
//! | ScoreCAM | softmax over k of `logit_c(X∘H_k) − logit_c(0)`              |
//! | Cfd-CAM  | `softmax(f(X∘H_k))[c]` (confidence) or `f(X∘H_k)[c]` (logits) |
//!
//! where `H_k` is channel k upsampled to the input and min-max normalized.
//! LayerCAM instead weights each activation element by its positive
//! gradient and fuses several layers by pixelwise maximum.

mod methods;
mod ops;

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use methods::{
    cfd_cam, cfd_cam_weights, channel_masks, grad_cam, grad_cam_weights, layer_cam, layer_cam_layer_map,
    score_cam, score_cam_weights,
};
pub use ops::{mask_input, min_max_normalize, resize_tensor, softmax, upsample_bilinear, weighted_sum_relu};

use crate::adapter::ClassifierHandle;
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Map2};

/// An H×W map with every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Map2", into = "Map2")]
pub struct SaliencyMap(Map2);

impl SaliencyMap {
    /// Wraps a map already known to lie in `[0, 1]`.
    pub(crate) fn from_normalized(map: Map2) -> Self {
        debug_assert!(map.data().iter().all(|v| (0.0..=1.0).contains(v)));
        Self(map)
    }

    /// Validating constructor for maps read from disk or built by callers.
    pub fn new(map: Map2) -> Result<Self> {
        if map.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            Ok(Self(map))
        } else {
            Err(Error::Validation("saliency values must lie in [0, 1]".into()))
        }
    }

    pub fn map(&self) -> &Map2 {
        &self.0
    }

    pub fn into_map(self) -> Map2 {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.0.at(y, x)
    }
}

impl TryFrom<Map2> for SaliencyMap {
    type Error = Error;

    fn try_from(map: Map2) -> Result<Self> {
        Self::new(map)
    }
}

impl From<SaliencyMap> for Map2 {
    fn from(s: SaliencyMap) -> Map2 {
        s.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamMethod {
    GradCam,
    ScoreCam,
    LayerCam,
    CfdCam,
}

impl CamMethod {
    pub const ALL: [CamMethod; 4] = [
        CamMethod::GradCam,
        CamMethod::ScoreCam,
        CamMethod::LayerCam,
        CamMethod::CfdCam,
    ];

    /// Identifier used on the command line and in file metadata.
    pub fn id(self) -> &'static str {
        match self {
            CamMethod::GradCam => "gradcam",
            CamMethod::ScoreCam => "scorecam",
            CamMethod::LayerCam => "layercam",
            CamMethod::CfdCam => "cfdcam",
        }
    }

    /// Name used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            CamMethod::GradCam => "Grad-CAM",
            CamMethod::ScoreCam => "ScoreCAM",
            CamMethod::LayerCam => "LayerCAM",
            CamMethod::CfdCam => "Cfd-CAM",
        }
    }

    pub fn from_id(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.id() == s)
    }
}

/// Channel weighting used by Cfd-CAM.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Target-class softmax probability of the masked input.
    #[default]
    Confidence,
    /// Raw target-class logit of the masked input (ablation).
    Logits,
}

impl Weighting {
    pub fn id(self) -> &'static str {
        match self {
            Weighting::Confidence => "confidence",
            Weighting::Logits => "logits",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightingKind {
    GradientGap,
    ScoreSoftmax,
    Confidence,
    Logit,
}

/// One weight per channel of the target activations.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelWeights {
    pub kind: WeightingKind,
    pub weights: Vec<f64>,
}

/// A fully specified CAM computation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamRequest {
    pub method: CamMethod,
    /// Target layers. Empty selects the defaults: the last hookable layer,
    /// or every hookable layer for LayerCAM.
    #[serde(default)]
    pub layers: Vec<String>,
    pub class: usize,
    /// Only read by Cfd-CAM.
    #[serde(default)]
    pub weighting: Weighting,
    /// Masked inputs per forward batch (ScoreCAM, Cfd-CAM).
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_batch_size() -> usize {
    8
}

impl CamRequest {
    pub fn new(method: CamMethod, class: usize) -> Self {
        Self {
            method,
            layers: Vec::new(),
            class,
            weighting: Weighting::Confidence,
            batch_size: default_batch_size(),
        }
    }

    pub fn with_layers<S: Into<String>>(mut self, layers: impl IntoIterator<Item = S>) -> Self {
        self.layers = layers.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_weighting(mut self, weighting: Weighting) -> Self {
        self.weighting = weighting;
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    /// Layers this request targets on `handle`, defaults resolved.
    pub fn resolved_layers(&self, handle: &ClassifierHandle) -> Result<Vec<String>> {
        if self.method != CamMethod::LayerCam && self.layers.len() > 1 {
            return Err(Error::Validation(alloc::format!(
                "{} takes a single target layer, got {}",
                self.method.id(),
                self.layers.len()
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be at least 1".into()));
        }
        if !self.layers.is_empty() {
            return Ok(self.layers.clone());
        }
        Ok(match self.method {
            CamMethod::LayerCam => handle.layer_registry().into_iter().map(String::from).collect(),
            _ => alloc::vec![String::from(handle.default_layer())],
        })
    }

    pub fn run(&self, handle: &ClassifierHandle, image: &ImageTensor) -> Result<SaliencyMap> {
        let layers = self.resolved_layers(handle)?;
        match self.method {
            CamMethod::GradCam => grad_cam(handle, image, self.class, &layers[0]),
            CamMethod::ScoreCam => score_cam(handle, image, self.class, &layers[0], self.batch_size),
            CamMethod::LayerCam => layer_cam(handle, image, self.class, &layers),
            CamMethod::CfdCam => cfd_cam(
                handle,
                image,
                self.class,
                &layers[0],
                self.weighting,
                self.batch_size,
            ),
        }
    }
}
