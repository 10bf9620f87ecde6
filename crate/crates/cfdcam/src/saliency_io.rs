//! Saliency maps on disk: a float64 little-endian row-major `.bin` and a
//! `.json` sidecar with shape and provenance.

use std::path::{Path, PathBuf};

use cfdcam_core::{Map2, SaliencyMap};
use serde::{Deserialize, Serialize};

use crate::error::{self, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaliencyMeta {
    pub height: usize,
    pub width: usize,
    pub dtype: String,
    pub order: String,
    pub method: String,
    pub class: usize,
    pub layers: Vec<String>,
    /// Set for Cfd-CAM only.
    pub weighting: Option<String>,
    pub scales: Vec<f64>,
    pub fusion: String,
    pub case_id: String,
    pub slice_index: usize,
    pub modality: String,
}

/// `<stem>.bin` and `<stem>.json`.
pub fn saliency_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let with = |ext: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".bin"), with(".json"))
}

pub fn write_saliency(stem: &Path, map: &SaliencyMap, meta: &SaliencyMeta) -> Result<()> {
    if map.shape() != (meta.height, meta.width) {
        return Err(Error::Config(format!(
            "metadata says {}x{} but the map is {:?}",
            meta.height,
            meta.width,
            map.shape()
        )));
    }
    let (bin, json) = saliency_paths(stem);
    let payload: Vec<u8> = map.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    error::write(&bin, &payload)?;
    error::write(&json, &error::json(meta))
}

pub fn read_saliency(stem: &Path) -> Result<(SaliencyMap, SaliencyMeta)> {
    let (bin, json) = saliency_paths(stem);
    let meta: SaliencyMeta = error::parse_json(&json)?;
    if meta.dtype != "float64" || meta.order != "row-major" {
        return Err(Error::format(&json, "expected float64 row-major data"));
    }
    let bytes = error::read(&bin)?;
    let n = meta.height * meta.width;
    if bytes.len() != n * 8 {
        return Err(Error::format(&bin, format!("expected {} bytes, found {}", n * 8, bytes.len())));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let map = Map2::from_vec(meta.height, meta.width, data).and_then(SaliencyMap::new);
    let map = map.map_err(|e| Error::format(&bin, e.to_string()))?;
    Ok((map, meta))
}
