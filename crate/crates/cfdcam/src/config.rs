//! The run configuration, a JSON document validated before any work.

use std::path::{Path, PathBuf};

use cfdcam_core::data::{Modality, SlicePolicy, SynthSpec};
use cfdcam_core::nn::REFERENCE_CHANNELS;
use cfdcam_core::train::TrainConfig;
use cfdcam_core::{Architecture, CamMethod, ScaleSpec};
use serde::{Deserialize, Serialize};

use crate::error::{self, Error, Result};

/// Where the volumes come from. Exactly one source must be set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Name used in report rows. Defaults to `synthetic`, `BraTS` or `custom`.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub synthetic: Option<SynthSpec>,
    /// Directory of BraTS case directories.
    #[serde(default)]
    pub root: Option<PathBuf>,
    /// Individual volume files or case directories.
    #[serde(default)]
    pub volumes: Vec<PathBuf>,
    /// Labels CSV for volumes without masks.
    #[serde(default)]
    pub labels: Option<PathBuf>,
}

impl DatasetConfig {
    pub fn display_name(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        if self.synthetic.is_some() {
            "synthetic".into()
        } else if self.root.is_some() {
            "BraTS".into()
        } else {
            "custom".into()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub architecture: Architecture,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::ReferenceCnn {
                channels: REFERENCE_CHANNELS.to_vec(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluate only slices labelled positive.
    pub positive_only: bool,
    /// Cap on evaluated slices, taken in case then slice order.
    pub max_slices: Option<usize>,
    /// Masked inputs per forward batch for ScoreCAM and Cfd-CAM.
    pub batch_size: usize,
    /// Target layer; the network's last stage when unset.
    pub layer: Option<String>,
    /// Reuse per-scale maps from the cache directory.
    pub cache: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            positive_only: true,
            max_slices: None,
            batch_size: 8,
            layer: None,
            cache: true,
        }
    }
}

fn default_modalities() -> Vec<Modality> {
    vec![Modality::Flair]
}

fn default_methods() -> Vec<CamMethod> {
    CamMethod::ALL.to_vec()
}

fn default_threshold() -> f64 {
    0.5
}

fn default_split() -> [u32; 3] {
    [8, 1, 1]
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    #[serde(default = "default_modalities")]
    pub modalities: Vec<Modality>,
    #[serde(default = "default_methods")]
    pub methods: Vec<CamMethod>,
    #[serde(default)]
    pub scales: ScaleSpec,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// `train.seed` is replaced by the run seed.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_split")]
    pub split: [u32; 3],
    #[serde(default)]
    pub slicing: SlicePolicy,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Drives the case split and training.
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn synthetic(spec: SynthSpec) -> Self {
        Self {
            dataset: DatasetConfig {
                synthetic: Some(spec),
                ..Default::default()
            },
            modalities: default_modalities(),
            methods: default_methods(),
            scales: ScaleSpec::default(),
            threshold: default_threshold(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            split: default_split(),
            slicing: SlicePolicy::default(),
            eval: EvalConfig::default(),
            output: default_output(),
            seed: 0,
        }
    }

    /// Parse and validate; unreadable files are I/O errors, everything else
    /// is a configuration error.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = error::read_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// The training configuration with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        let d = &self.dataset;
        let sources = d.synthetic.is_some() as usize + d.root.is_some() as usize + (!d.volumes.is_empty()) as usize;
        if sources != 1 {
            return cfg("dataset needs exactly one of `synthetic`, `root` or `volumes`".into());
        }
        if d.labels.is_some() && d.synthetic.is_some() {
            return cfg("a labels file cannot be combined with a synthetic dataset".into());
        }
        if let Some(s) = &d.synthetic {
            if s.n_cases < 10 {
                return cfg(format!("synthetic.n_cases = {} but at least 10 are required", s.n_cases));
            }
            if s.slices_per_case == 0 || s.image_size < 16 {
                return cfg("synthetic volumes need at least one slice and 16 px".into());
            }
            if self.modalities != [Modality::Flair] {
                return cfg("the synthetic dataset only has the T2-FLAIR modality".into());
            }
        }
        if self.modalities.is_empty() {
            return cfg("at least one modality is required".into());
        }
        if self.methods.is_empty() {
            return cfg("at least one method is required".into());
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if self.modalities[..i].contains(m) {
                return cfg(format!("modality {m} listed twice"));
            }
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return cfg(format!("method {} listed twice", m.id()));
            }
        }
        self.scales.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return cfg(format!("threshold {} must lie in (0, 1)", self.threshold));
        }
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.split.contains(&0) {
            return cfg(format!("split ratios {:?} must be positive", self.split));
        }
        if self.eval.batch_size == 0 {
            return cfg("eval.batch_size must be at least 1".into());
        }
        if self.eval.max_slices == Some(0) {
            return cfg("eval.max_slices must be at least 1".into());
        }
        if self.model.architecture == Architecture::Custom {
            return cfg("model.architecture cannot be `custom`".into());
        }
        if self.output.as_os_str().is_empty() {
            return cfg("output directory is empty".into());
        }
        Ok(())
    }
}
