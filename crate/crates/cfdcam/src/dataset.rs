//! The dataset manifest written by `ingest`, the labels CSV, and the two
//! loaders built on them.
//!
//! [`load_training_slices`] opens image volumes only and takes labels from
//! the manifest, so no mask bytes are read on the training path.
//! [`load_eval_records`] is the only reader of mask files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cfdcam_core::data::{
    slice_volume, split_cases, EvalRecord, Modality, SlicePolicy, SliceRecord, Split, SplitSpec, VolumeRecord,
};
use serde::{Deserialize, Serialize};

use crate::error::{self, Error, Result};
use crate::volume_io::{read_volume_file, LoadedVolume};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub case_id: String,
    pub split: SplitName,
    /// `[depth, height, width]`
    pub dims: [usize; 3],
    /// Image volume per modality. Relative paths resolve against the
    /// manifest directory.
    pub volumes: BTreeMap<Modality, PathBuf>,
    pub mask: Option<PathBuf>,
    /// Image-level label per slice, per modality.
    pub labels: BTreeMap<Modality, Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub modalities: Vec<Modality>,
    pub split_ratios: [u32; 3],
    pub split_seed: u64,
    pub min_pixels: usize,
    pub cases: Vec<CaseEntry>,
    /// Σ depth over cases × modalities.
    pub total_slices: usize,
}

impl DatasetManifest {
    pub fn split(&self) -> Split {
        let pick = |s: SplitName| {
            self.cases
                .iter()
                .filter(|c| c.split == s)
                .map(|c| c.case_id.clone())
                .collect()
        };
        Split {
            train: pick(SplitName::Train),
            val: pick(SplitName::Val),
            test: pick(SplitName::Test),
        }
    }

    pub fn cases_in(&self, split: SplitName) -> impl Iterator<Item = &CaseEntry> {
        self.cases.iter().filter(move |c| c.split == split)
    }

    pub fn count_slices(cases: &[CaseEntry], modalities: &[Modality]) -> usize {
        cases.iter().map(|c| c.dims[0]).sum::<usize>() * modalities.len()
    }
}

pub fn dataset_dir(out: &Path) -> PathBuf {
    out.join("dataset")
}

pub fn manifest_path(out: &Path) -> PathBuf {
    dataset_dir(out).join(MANIFEST_FILE)
}

pub fn write_manifest(out: &Path, manifest: &DatasetManifest) -> Result<()> {
    error::write(&manifest_path(out), &error::json(manifest))
}

pub fn read_manifest(out: &Path) -> Result<DatasetManifest> {
    error::parse_json(&manifest_path(out))
}

/// Assigns splits to cases, in case-id order.
pub fn assign_splits(ids: &[String], ratios: [u32; 3], seed: u64) -> Result<BTreeMap<String, SplitName>> {
    let split = split_cases(ids, &SplitSpec { ratios, seed })?;
    let mut out = BTreeMap::new();
    for (ids, name) in [
        (&split.train, SplitName::Train),
        (&split.val, SplitName::Val),
        (&split.test, SplitName::Test),
    ] {
        for id in ids {
            out.insert(id.clone(), name);
        }
    }
    Ok(out)
}

/// One row of the labels CSV.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub case_id: String,
    pub slice_index: usize,
    pub modality: Modality,
    pub label: u8,
}

pub type LabelTable = BTreeMap<(String, Modality), Vec<u8>>;

/// Reads `case_id,slice_index,modality,label`. Each (case, modality) must
/// list slices `0..D` exactly once; labels are 0 or 1.
pub fn read_labels_csv(path: &Path) -> Result<LabelTable> {
    let text = error::read_string(path)?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut raw: BTreeMap<(String, Modality), BTreeMap<usize, u8>> = BTreeMap::new();
    for row in reader.deserialize::<LabelRow>() {
        let row = row.map_err(|e| Error::format(path, e.to_string()))?;
        if row.label > 1 {
            return Err(Error::format(path, format!("label {} is not 0 or 1", row.label)));
        }
        let slot = raw.entry((row.case_id.clone(), row.modality)).or_default();
        if slot.insert(row.slice_index, row.label).is_some() {
            return Err(Error::format(
                path,
                format!("duplicate label for {} {} slice {}", row.case_id, row.modality, row.slice_index),
            ));
        }
    }
    let mut out = BTreeMap::new();
    for (key, slices) in raw {
        if slices.keys().copied().ne(0..slices.len()) {
            return Err(Error::format(path, format!("{} {} has gaps in its slice indices", key.0, key.1)));
        }
        out.insert(key, slices.into_values().collect());
    }
    Ok(out)
}

pub fn write_labels_csv(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in &manifest.cases {
        for (&modality, labels) in &c.labels {
            for (slice_index, &label) in labels.iter().enumerate() {
                w.serialize(LabelRow {
                    case_id: c.case_id.clone(),
                    slice_index,
                    modality,
                    label,
                })
                .map_err(|e| Error::format(path, e.to_string()))?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    error::write(path, &bytes)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn check_dims(path: &Path, loaded: &LoadedVolume, dims: [usize; 3]) -> Result<()> {
    let v = &loaded.volume;
    if [v.depth, v.height, v.width] != dims {
        return Err(Error::format(
            path,
            format!("volume is {:?} but the manifest says {dims:?}", v.dims()),
        ));
    }
    Ok(())
}

/// Image volume of one case and modality, with no mask attached.
pub fn load_case_image(out: &Path, case: &CaseEntry, modality: Modality) -> Result<VolumeRecord> {
    let rel = case.volumes.get(&modality).ok_or_else(|| {
        Error::format(manifest_path(out), format!("case {} has no {modality} volume", case.case_id))
    })?;
    let path = resolve(&dataset_dir(out), rel);
    let loaded = read_volume_file(&path)?;
    check_dims(&path, &loaded, case.dims)?;
    Ok(VolumeRecord {
        case_id: case.case_id.clone(),
        modalities: BTreeMap::from([(modality, loaded.volume)]),
        mask: None,
    })
}

/// Training slices of `split`, labelled from the manifest.
pub fn load_training_slices(
    out: &Path,
    manifest: &DatasetManifest,
    split: SplitName,
    modality: Modality,
    policy: &SlicePolicy,
) -> Result<Vec<SliceRecord>> {
    let mut slices = Vec::new();
    for case in manifest.cases_in(split) {
        let record = load_case_image(out, case, modality)?;
        let labels = case.labels.get(&modality).ok_or_else(|| {
            Error::format(manifest_path(out), format!("case {} has no {modality} labels", case.case_id))
        })?;
        slices.extend(slice_volume(&record, modality, Some(labels), policy)?.slices);
    }
    Ok(slices)
}

/// Evaluation records of `split`; every case needs a mask.
pub fn load_eval_records(
    out: &Path,
    manifest: &DatasetManifest,
    split: SplitName,
    modality: Modality,
    policy: &SlicePolicy,
) -> Result<Vec<EvalRecord>> {
    let mut records = Vec::new();
    for case in manifest.cases_in(split) {
        let mut record = load_case_image(out, case, modality)?;
        let rel = case.mask.as_ref().ok_or_else(|| {
            Error::format(
                manifest_path(out),
                format!("case {} has no mask; evaluation needs ground truth", case.case_id),
            )
        })?;
        let path = resolve(&dataset_dir(out), rel);
        let loaded = read_volume_file(&path)?;
        check_dims(&path, &loaded, case.dims)?;
        record.mask = Some(loaded.to_mask()?);
        let sliced = slice_volume(&record, modality, None, policy)?;
        records.extend(sliced.eval.expect("mask present"));
    }
    Ok(records)
}
