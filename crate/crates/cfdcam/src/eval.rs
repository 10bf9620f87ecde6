//! Saliency evaluation over slices, with a content-addressed cache of
//! per-scale maps.
//!
//! A multi-scale map is the fusion of independently computed per-scale
//! maps, so the single-scale and multi-scale variants of an ablation share
//! work through the cache. Cache keys hash the checkpoint weights, the CAM
//! request, the scale factor and the input pixels.

use std::path::{Path, PathBuf};

use cfdcam_core::data::EvalRecord;
use cfdcam_core::metrics::{binarize, metric_triple, summarize};
use cfdcam_core::multiscale::{fuse_maps, per_scale_maps};
use cfdcam_core::{CamRequest, ClassifierHandle, ImageTensor, Map2, MetricTriple, SaliencyMap, ScaleSpec};
use sha2::{Digest, Sha256};

use crate::error::{self, Result};
use crate::report::Cells;

pub const CACHE_ENV: &str = "CFDCAM_CACHE_DIR";

/// `$CFDCAM_CACHE_DIR`, else `<out>/cache`.
pub fn cache_dir(out: &Path) -> PathBuf {
    match std::env::var_os(CACHE_ENV) {
        Some(d) if !d.is_empty() => PathBuf::from(d),
        _ => out.join("cache"),
    }
}

pub struct Evaluator<'a> {
    handle: &'a ClassifierHandle,
    fingerprint: String,
    cache: Option<PathBuf>,
}

impl<'a> Evaluator<'a> {
    /// `fingerprint` identifies the weights; `cache` enables map reuse.
    pub fn new(handle: &'a ClassifierHandle, fingerprint: impl Into<String>, cache: Option<PathBuf>) -> Self {
        Self {
            handle,
            fingerprint: fingerprint.into(),
            cache,
        }
    }

    fn key(&self, request: &CamRequest, image: &ImageTensor, factor: f64) -> String {
        let mut h = Sha256::new();
        h.update(self.fingerprint.as_bytes());
        h.update(serde_json::to_vec(request).expect("serializable request"));
        h.update(factor.to_le_bytes());
        let (c, y, x) = image.shape();
        for d in [c, y, x] {
            h.update((d as u64).to_le_bytes());
        }
        for v in image.data() {
            h.update(v.to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }

    fn cache_path(&self, key: &str) -> Option<PathBuf> {
        self.cache.as_ref().map(|d| d.join("cam").join(&key[..2]).join(format!("{key}.bin")))
    }

    fn read_cached(path: &Path, shape: (usize, usize)) -> Option<SaliencyMap> {
        let bytes = std::fs::read(path).ok()?;
        if bytes.len() != 8 * shape.0 * shape.1 {
            return None;
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Map2::from_vec(shape.0, shape.1, data).and_then(SaliencyMap::new).ok()
    }

    /// Map at one scale, resized back to the image and normalized.
    pub fn scale_map(&self, request: &CamRequest, image: &ImageTensor, factor: f64) -> Result<SaliencyMap> {
        let shape = (image.height(), image.width());
        let path = self.cache_path(&self.key(request, image, factor));
        if let Some(hit) = path.as_deref().and_then(|p| Self::read_cached(p, shape)) {
            return Ok(hit);
        }
        let mut maps = per_scale_maps(request, self.handle, image, &ScaleSpec::single(factor))?;
        let map = maps.pop().expect("one scale requested");
        if let Some(p) = path {
            let bytes: Vec<u8> = map.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            error::write(&p, &bytes)?;
        }
        Ok(map)
    }

    pub fn saliency(&self, request: &CamRequest, image: &ImageTensor, scales: &ScaleSpec) -> Result<SaliencyMap> {
        scales.validate()?;
        let maps = scales
            .factors
            .iter()
            .map(|&f| self.scale_map(request, image, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(fuse_maps(&maps, scales.fusion)?)
    }

    /// Per-slice metrics of the thresholded map against each mask.
    pub fn evaluate(
        &self,
        request: &CamRequest,
        scales: &ScaleSpec,
        threshold: f64,
        records: &[EvalRecord],
    ) -> Result<Vec<MetricTriple>> {
        records
            .iter()
            .map(|r| {
                let map = self.saliency(request, &r.slice.image, scales)?;
                Ok(metric_triple(&binarize(&map, threshold)?, &r.mask)?)
            })
            .collect()
    }
}

pub fn summarize_triples(triples: &[MetricTriple]) -> Result<Cells> {
    let col = |f: fn(&MetricTriple) -> f64| summarize(&triples.iter().map(f).collect::<Vec<_>>());
    Ok(Cells {
        dice: col(|t| t.dice)?,
        iou: col(|t| t.iou)?,
        hd95: col(|t| t.hd95)?,
    })
}

/// Positive-only filter and slice cap, in record order.
pub fn select_records(records: Vec<EvalRecord>, positive_only: bool, max: Option<usize>) -> Vec<EvalRecord> {
    records
        .into_iter()
        .filter(|r| !positive_only || r.slice.label == 1)
        .take(max.unwrap_or(usize::MAX))
        .collect()
}
