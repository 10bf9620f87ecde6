//! Checkpoint directories: `manifest.json` describing the network and
//! `weights.safetensors` holding every named tensor.
//!
//! Tensors are written as F64. F32 and F64 are both accepted on load, so
//! weights exported from other frameworks load as long as the tensor names
//! follow the torchvision convention. Extra tensors (for example
//! `num_batches_tracked`) are ignored.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use cfdcam_core::nn::build_architecture;
use cfdcam_core::{Architecture, ClassifierHandle, InputSpec, Network};
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{self, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub architecture: Architecture,
    pub num_classes: usize,
    pub input: InputSpec,
    pub layer_registry: Vec<String>,
    pub weights: String,
}

impl CheckpointManifest {
    pub fn describe(network: &Network) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            architecture: network.architecture.clone(),
            num_classes: network.num_classes(),
            input: network.input,
            layer_registry: network.layer_registry().into_iter().map(String::from).collect(),
            weights: WEIGHTS_FILE.into(),
        }
    }
}

pub fn save_checkpoint(dir: &Path, network: &Network) -> Result<()> {
    if network.architecture == Architecture::Custom {
        return Err(Error::Config("custom networks cannot be checkpointed".into()));
    }
    let manifest = CheckpointManifest::describe(network);
    let params = network.params();
    let shapes = network.param_shapes();
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = params
        .iter()
        .zip(shapes)
        .map(|(p, shape)| {
            let data = p.values.iter().flat_map(|v| v.to_le_bytes()).collect();
            (p.name(), shape, data)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, shape, data)| {
            safetensors::tensor::TensorView::new(Dtype::F64, shape.clone(), data).map(|v| (name.clone(), v))
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format(dir, e.to_string()))?;
    let encoded = safetensors::serialize(views, None).map_err(|e| Error::format(dir, e.to_string()))?;
    error::write(&dir.join(WEIGHTS_FILE), &encoded)?;
    error::write(&dir.join(MANIFEST_FILE), &error::json(&manifest))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let manifest: CheckpointManifest = error::parse_json(&path)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported checkpoint format version {}", manifest.format_version),
        ));
    }
    Ok(manifest)
}

fn decode(path: &Path, name: &str, view: &safetensors::tensor::TensorView<'_>) -> Result<Vec<f64>> {
    let data = view.data();
    match view.dtype() {
        Dtype::F64 => Ok(data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect()),
        Dtype::F32 => Ok(data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect()),
        other => Err(Error::format(path, format!("tensor `{name}` has unsupported dtype {other:?}"))),
    }
}

pub fn load_network(dir: &Path) -> Result<Network> {
    let manifest = read_manifest(dir)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut network = build_architecture(&manifest.architecture, manifest.input, manifest.num_classes)
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let registry: Vec<String> = network.layer_registry().into_iter().map(String::from).collect();
    if registry != manifest.layer_registry {
        return Err(Error::format(
            &manifest_path,
            format!(
                "layer registry {:?} does not match the architecture's {:?}",
                manifest.layer_registry, registry
            ),
        ));
    }
    let weights_path = dir.join(&manifest.weights);
    let bytes = error::read(&weights_path)?;
    let tensors = SafeTensors::deserialize(&bytes).map_err(|e| Error::format(&weights_path, e.to_string()))?;
    let shapes: HashMap<String, Vec<usize>> = network
        .params()
        .iter()
        .map(|p| p.name())
        .zip(network.param_shapes())
        .collect();
    let mut decoded = HashMap::new();
    for (name, shape) in &shapes {
        let view = tensors
            .tensor(name)
            .map_err(|_| Error::format(&weights_path, format!("missing tensor `{name}`")))?;
        if view.shape() != shape.as_slice() {
            return Err(Error::format(
                &weights_path,
                format!("tensor `{name}` has shape {:?}, expected {shape:?}", view.shape()),
            ));
        }
        decoded.insert(name.clone(), decode(&weights_path, name, &view)?);
    }
    network
        .load_params(|name| decoded.remove(name))
        .map_err(|e| Error::format(&weights_path, e.to_string()))?;
    Ok(network)
}

pub fn load_checkpoint(dir: &Path) -> Result<ClassifierHandle> {
    Ok(ClassifierHandle::new(load_network(dir)?))
}

/// SHA-256 of the weights file, hex encoded. Identifies the trained model
/// in cache keys.
pub fn fingerprint(dir: &Path) -> Result<String> {
    let manifest = read_manifest(dir)?;
    let bytes = error::read(&dir.join(manifest.weights))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub fn checkpoint_dir(out: &Path, modality: cfdcam_core::data::Modality) -> PathBuf {
    out.join("checkpoints").join(modality.name())
}
