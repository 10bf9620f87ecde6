//! Volume files: NIfTI-1 (`.nii`, `.nii.gz`) and the raw format, a JSON
//! header `{dims, dtype, order}` next to a little-endian float32 payload.
//!
//! Volumes are returned as D×H×W with x fastest, which is both the NIfTI
//! voxel order and the raw payload order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cfdcam_core::data::{MaskVolume, Modality, Volume, VolumeRecord};
use nifti::{NiftiObject, NiftiVolume, RandomAccessNiftiVolume};
use serde::{Deserialize, Serialize};

use crate::error::{self, Error, Result};

pub const RAW_DTYPE: &str = "float32";
pub const RAW_ORDER: &str = "row-major";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawHeader {
    /// `[depth, height, width]`
    pub dims: [usize; 3],
    pub dtype: String,
    pub order: String,
    /// Voxel spacing `[z, row, column]`.
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 3],
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

/// A volume together with its voxel spacing `[z, row, column]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedVolume {
    pub volume: Volume,
    pub spacing: [f64; 3],
}

impl LoadedVolume {
    /// Nonzero voxels are foreground (BraTS labels 1, 2 and 4 all count).
    pub fn to_mask(&self) -> Result<MaskVolume> {
        let v = &self.volume;
        let mask = MaskVolume::new(v.depth, v.height, v.width, v.data.iter().map(|&x| x != 0.0).collect())?;
        Ok(mask.with_spacing(self.spacing[1], self.spacing[2])?)
    }
}

/// What a file holds, judged by its name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileRole {
    Image(Modality),
    Mask,
}

/// Header and payload paths of a raw volume given either of them.
pub fn raw_paths(path: &Path) -> Result<(PathBuf, PathBuf)> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => Ok((path.to_path_buf(), path.with_extension("bin"))),
        Some("bin") => Ok((path.with_extension("json"), path.to_path_buf())),
        _ => Err(Error::format(path, "raw volumes need a .json or .bin extension")),
    }
}

pub fn write_raw(path: &Path, volume: &Volume, spacing: [f64; 3]) -> Result<()> {
    let (header_path, payload_path) = raw_paths(path)?;
    let header = RawHeader {
        dims: [volume.depth, volume.height, volume.width],
        dtype: RAW_DTYPE.into(),
        order: RAW_ORDER.into(),
        spacing,
    };
    let mut payload = Vec::with_capacity(volume.data.len() * 4);
    for v in &volume.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    error::write(&payload_path, &payload)?;
    error::write(&header_path, &error::json(&header))
}

/// Stores a mask as a 0/1 float32 raw volume.
pub fn write_raw_mask(path: &Path, mask: &MaskVolume) -> Result<()> {
    let data = mask.data.iter().map(|&b| b as u8 as f32).collect();
    let volume = Volume::new(mask.depth, mask.height, mask.width, data)?;
    write_raw(path, &volume, [1.0, mask.spacing.0, mask.spacing.1])
}

pub fn read_raw(path: &Path) -> Result<LoadedVolume> {
    let (header_path, payload_path) = raw_paths(path)?;
    let header: RawHeader = error::parse_json(&header_path)?;
    if header.dtype != RAW_DTYPE {
        return Err(Error::format(&header_path, format!("unsupported dtype `{}`", header.dtype)));
    }
    if header.order != RAW_ORDER {
        return Err(Error::format(&header_path, format!("unsupported order `{}`", header.order)));
    }
    if header.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::format(&header_path, "spacing must be positive"));
    }
    let [d, h, w] = header.dims;
    let n = d
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::format(&header_path, format!("invalid dims {:?}", header.dims)))?;
    let bytes = error::read(&payload_path)?;
    if bytes.len() != n * 4 {
        return Err(Error::format(
            &payload_path,
            format!("expected {} payload bytes for dims {:?}, found {}", n * 4, header.dims, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(LoadedVolume {
        volume: Volume::new(d, h, w, data)?,
        spacing: header.spacing,
    })
}

pub fn read_nifti(path: &Path) -> Result<LoadedVolume> {
    let fmt = |e: nifti::NiftiError| match e {
        nifti::NiftiError::Io(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    };
    let obj = nifti::ReaderOptions::new().read_file(path).map_err(fmt)?;
    let header = obj.header().clone();
    let volume = obj.into_volume();
    let dim = volume.dim().to_vec();
    let ok_rank = dim.len() == 3 || (dim.len() == 4 && dim[3] == 1);
    if !ok_rank {
        return Err(Error::format(path, format!("expected a 3D volume, found dims {dim:?}")));
    }
    let (w, h, d) = (dim[0] as usize, dim[1] as usize, dim[2] as usize);
    let mut data = Vec::with_capacity(w * h * d);
    let mut coords = vec![0u16; dim.len()];
    for z in 0..dim[2] {
        for y in 0..dim[1] {
            for x in 0..dim[0] {
                coords[0] = x;
                coords[1] = y;
                coords[2] = z;
                data.push(volume.get_f32(&coords).map_err(fmt)?);
            }
        }
    }
    let sp = |i: usize| {
        let s = header.pixdim[i].abs() as f64;
        if s > 0.0 && s.is_finite() {
            s
        } else {
            1.0
        }
    };
    Ok(LoadedVolume {
        volume: Volume::new(d, h, w, data)?,
        spacing: [sp(3), sp(2), sp(1)],
    })
}

fn strip_volume_extension(name: &str) -> Option<&str> {
    [".nii.gz", ".nii", ".json", ".bin"]
        .iter()
        .find_map(|ext| name.strip_suffix(ext))
}

/// Reads a NIfTI or raw volume, chosen by extension.
pub fn read_volume_file(path: &Path) -> Result<LoadedVolume> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        read_nifti(path)
    } else if name.ends_with(".json") || name.ends_with(".bin") {
        read_raw(path)
    } else {
        Err(Error::format(path, "not a NIfTI (.nii, .nii.gz) or raw (.json/.bin) volume"))
    }
}

/// Role from the file stem: a BraTS suffix (`_t1`, `_t1ce`, `_t2`,
/// `_flair`, `_seg`) or a bare modality name (`T2-FLAIR`, `mask`).
pub fn file_role(path: &Path) -> Option<FileRole> {
    let name = path.file_name()?.to_str()?;
    let stem = strip_volume_extension(name)?;
    if let Some(m) = Modality::from_name(stem) {
        return Some(FileRole::Image(m));
    }
    let lower = stem.to_ascii_lowercase();
    if lower == "mask" || lower == "seg" {
        return Some(FileRole::Mask);
    }
    let suffix = lower.rsplit_once('_')?.1;
    Some(match suffix {
        "t1" => FileRole::Image(Modality::T1),
        "t1ce" => FileRole::Image(Modality::T1ce),
        "t2" => FileRole::Image(Modality::T2),
        "flair" => FileRole::Image(Modality::Flair),
        "seg" => FileRole::Mask,
        _ => return None,
    })
}

/// A case directory (BraTS layout) or a single image file whose modality
/// is recognisable from its name.
pub fn load_volume(path: &Path) -> Result<VolumeRecord> {
    if path.is_dir() {
        return load_case_dir(path);
    }
    match file_role(path) {
        Some(FileRole::Image(m)) => load_volume_as(path, m),
        Some(FileRole::Mask) => Err(Error::format(path, "a segmentation file is not an image volume")),
        None => Err(Error::format(path, "cannot tell the modality from the file name")),
    }
}

/// Loads one image file as the given modality, without a mask.
pub fn load_volume_as(path: &Path, modality: Modality) -> Result<VolumeRecord> {
    let loaded = read_volume_file(path)?;
    let case_id = path
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(strip_volume_extension)
        .unwrap_or("case")
        .to_string();
    Ok(VolumeRecord {
        case_id,
        modalities: BTreeMap::from([(modality, loaded.volume)]),
        mask: None,
    })
}

/// Volume files of a case directory by role. Raw volumes are listed by
/// their `.json` header.
pub fn case_files(dir: &Path) -> Result<(BTreeMap<Modality, PathBuf>, Option<PathBuf>)> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    let mut images = BTreeMap::new();
    let mut mask = None;
    for p in entries {
        if !p.is_file() || p.extension().is_some_and(|e| e == "bin") {
            continue;
        }
        match file_role(&p) {
            Some(FileRole::Image(m)) => {
                if images.insert(m, p.clone()).is_some() {
                    return Err(Error::format(dir, format!("more than one {m} volume")));
                }
            }
            Some(FileRole::Mask) => {
                if mask.replace(p).is_some() {
                    return Err(Error::format(dir, "more than one segmentation volume"));
                }
            }
            None => {}
        }
    }
    if images.is_empty() {
        return Err(Error::format(dir, "no modality volumes found"));
    }
    Ok((images, mask))
}

pub fn load_case_dir(dir: &Path) -> Result<VolumeRecord> {
    let case_id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::format(dir, "case directory has no usable name"))?
        .to_string();
    let (images, mask) = case_files(dir)?;
    let mut modalities = BTreeMap::new();
    for (m, p) in images {
        modalities.insert(m, read_volume_file(&p)?.volume);
    }
    let mask = match mask {
        Some(p) => Some(read_volume_file(&p)?.to_mask()?),
        None => None,
    };
    let record = VolumeRecord {
        case_id,
        modalities,
        mask,
    };
    record
        .validate()
        .map_err(|e| Error::format(dir, e.to_string()))?;
    Ok(record)
}
