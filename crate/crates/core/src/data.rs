//! Volumes, 2D slices with image-level labels, case-level splits and the
//! synthetic blob dataset.
//!
//! Training code consumes [`SliceRecord`], which has no mask field; the
//! ground-truth mask travels only in [`EvalRecord`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::metrics::BinaryMask;
use crate::tensor::Tensor3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "T1")]
    T1,
    #[serde(rename = "T1-CE")]
    T1ce,
    #[serde(rename = "T2")]
    T2,
    #[serde(rename = "T2-FLAIR")]
    Flair,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1, Modality::T1ce, Modality::T2, Modality::Flair];

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "T1",
            Modality::T1ce => "T1-CE",
            Modality::T2 => "T2",
            Modality::Flair => "T2-FLAIR",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }
}

impl core::fmt::Display for Modality {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// D×H×W intensity volume, z-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(depth: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != depth * height * width {
            return Err(Error::Shape(format!(
                "{} voxels cannot fill a {depth}x{height}x{width} volume",
                data.len()
            )));
        }
        Ok(Self {
            depth,
            height,
            width,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.depth, self.height, self.width)
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[z * n..(z + 1) * n]
    }
}

/// D×H×W boolean segmentation volume.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
    /// In-plane pixel spacing (row, column), carried into each slice mask.
    pub spacing: (f64, f64),
}

impl MaskVolume {
    pub fn new(depth: usize, height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != depth * height * width {
            return Err(Error::Shape(format!(
                "{} voxels cannot fill a {depth}x{height}x{width} mask",
                data.len()
            )));
        }
        Ok(Self {
            depth,
            height,
            width,
            data,
            spacing: (1.0, 1.0),
        })
    }

    pub fn with_spacing(mut self, row: f64, col: f64) -> Result<Self> {
        BinaryMask::empty(1, 1).with_spacing(row, col)?;
        self.spacing = (row, col);
        Ok(self)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.depth, self.height, self.width)
    }

    pub fn slice(&self, z: usize) -> BinaryMask {
        let n = self.height * self.width;
        BinaryMask::new(self.height, self.width, self.data[z * n..(z + 1) * n].to_vec())
            .and_then(|m| m.with_spacing(self.spacing.0, self.spacing.1))
            .expect("slice has the right length and a validated spacing")
    }
}

/// One case: co-registered modality volumes and an optional tumor mask.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeRecord {
    pub case_id: String,
    pub modalities: BTreeMap<Modality, Volume>,
    pub mask: Option<MaskVolume>,
}

impl VolumeRecord {
    pub fn validate(&self) -> Result<()> {
        let mut dims = None;
        for (m, v) in &self.modalities {
            match dims {
                None => dims = Some(v.dims()),
                Some(d) if d != v.dims() => {
                    return Err(Error::Shape(format!(
                        "case {}: {m} is {:?}, expected {:?}",
                        self.case_id,
                        v.dims(),
                        d
                    )))
                }
                _ => {}
            }
        }
        if let (Some(d), Some(mask)) = (dims, &self.mask) {
            if mask.dims() != d {
                return Err(Error::Shape(format!(
                    "case {}: mask is {:?}, volumes are {:?}",
                    self.case_id,
                    mask.dims(),
                    d
                )));
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> Option<usize> {
        self.modalities
            .values()
            .next()
            .map(|v| v.depth)
            .or(self.mask.as_ref().map(|m| m.depth))
    }
}

/// A 2D modality slice with its image-level label. Deliberately carries no
/// segmentation mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub case_id: String,
    pub slice_index: usize,
    pub modality: Modality,
    pub image: Tensor3,
    pub label: u8,
}

impl SliceRecord {
    /// Every field of the record, in declaration order.
    pub const FIELDS: [&'static str; 5] = ["case_id", "slice_index", "modality", "image", "label"];
}

/// A slice plus its ground-truth mask; used only for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub slice: SliceRecord,
    pub mask: BinaryMask,
}

/// Intensity normalization applied during slicing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    None,
    /// Per-slice min-max ([`normalize_intensity`]).
    MinMax,
    /// Per-slice standardization.
    ZScore,
    /// Standardization with the mean and std of the whole modality volume,
    /// so every slice of a case shares one affine map.
    #[default]
    VolumeZScore,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlicePolicy {
    /// Foreground pixels needed for a positive label.
    pub min_pixels: usize,
    pub normalization: Normalization,
}

impl Default for SlicePolicy {
    fn default() -> Self {
        Self {
            min_pixels: 1,
            normalization: Normalization::VolumeZScore,
        }
    }
}

/// 1 iff the mask has at least one foreground pixel.
pub fn derive_label(mask: &BinaryMask) -> u8 {
    derive_label_with(mask, 1)
}

pub fn derive_label_with(mask: &BinaryMask, min_pixels: usize) -> u8 {
    (mask.count() >= min_pixels.max(1)) as u8
}

/// Per-slice min-max scaling to `[0, 1]`; constant slices become zeros.
pub fn normalize_intensity(slice: &Tensor3) -> Result<Tensor3> {
    slice.ensure_finite("slice")?;
    let mut out = slice.clone();
    let lo = slice.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = slice.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        out.map_inplace(|v| (v - lo) / (hi - lo));
    } else {
        out.map_inplace(|_| 0.0);
    }
    Ok(out)
}

/// Per-slice standardization to zero mean and unit variance.
pub fn zscore_intensity(slice: &Tensor3) -> Result<Tensor3> {
    slice.ensure_finite("slice")?;
    let n = slice.len() as f64;
    let mean = slice.data().iter().sum::<f64>() / n;
    let var = slice.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = math::sqrt(var);
    let mut out = slice.clone();
    if std > 0.0 {
        out.map_inplace(|v| (v - mean) / std);
    } else {
        out.map_inplace(|_| 0.0);
    }
    Ok(out)
}

/// Mean and population std over every voxel; errors on non-finite data.
pub fn volume_stats(vol: &Volume) -> Result<(f64, f64)> {
    if vol.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("volume contains non-finite values".into()));
    }
    let n = vol.data.len().max(1) as f64;
    let mean = vol.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = vol.data.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / n;
    Ok((mean, math::sqrt(var)))
}

/// Output of [`slice_volume`]; `eval` is present only when the volume has a mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SlicedVolume {
    pub slices: Vec<SliceRecord>,
    pub eval: Option<Vec<EvalRecord>>,
}

/// Cuts one modality into z-ordered 2D slices. Labels come from the mask
/// when present, otherwise from `external_labels` (one per slice).
pub fn slice_volume(
    volume: &VolumeRecord,
    modality: Modality,
    external_labels: Option<&[u8]>,
    policy: &SlicePolicy,
) -> Result<SlicedVolume> {
    volume.validate()?;
    let vol = volume.modalities.get(&modality).ok_or_else(|| {
        Error::Validation(format!("case {} has no {modality} volume", volume.case_id))
    })?;
    let labels: Vec<u8> = match (&volume.mask, external_labels) {
        (Some(mask), _) => (0..vol.depth)
            .map(|z| derive_label_with(&mask.slice(z), policy.min_pixels))
            .collect(),
        (None, Some(l)) => {
            if l.len() != vol.depth {
                return Err(Error::Validation(format!(
                    "case {}: {} labels for {} slices",
                    volume.case_id,
                    l.len(),
                    vol.depth
                )));
            }
            if let Some(bad) = l.iter().find(|&&v| v > 1) {
                return Err(Error::Validation(format!("label {bad} is not 0 or 1")));
            }
            l.to_vec()
        }
        (None, None) => {
            return Err(Error::Validation(format!(
                "case {} has no mask; an external label file is required",
                volume.case_id
            )))
        }
    };
    let (mean, std) = volume_stats(vol)?;
    let mut slices = Vec::with_capacity(vol.depth);
    for (z, &label) in labels.iter().enumerate() {
        let raw = Tensor3::from_vec(
            1,
            vol.height,
            vol.width,
            vol.slice(z).iter().map(|&v| v as f64).collect(),
        )?;
        let image = match policy.normalization {
            Normalization::None => {
                raw.ensure_finite("slice")?;
                raw
            }
            Normalization::MinMax => normalize_intensity(&raw)?,
            Normalization::ZScore => zscore_intensity(&raw)?,
            Normalization::VolumeZScore => {
                let mut t = raw;
                t.map_inplace(|v| if std > 0.0 { (v - mean) / std } else { 0.0 });
                t
            }
        };
        slices.push(SliceRecord {
            case_id: volume.case_id.clone(),
            slice_index: z,
            modality,
            image,
            label,
        });
    }
    let eval = volume.mask.as_ref().map(|mask| {
        slices
            .iter()
            .map(|s| EvalRecord {
                slice: s.clone(),
                mask: mask.slice(s.slice_index),
            })
            .collect()
    });
    Ok(SlicedVolume { slices, eval })
}

/// Case-level split ratios (train:val:test) and shuffle seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub ratios: [u32; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [8, 1, 1],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn assignment(&self, case_id: &str) -> Option<&'static str> {
        let has = |v: &Vec<String>| v.iter().any(|c| c == case_id);
        if has(&self.train) {
            Some("train")
        } else if has(&self.val) {
            Some("val")
        } else if has(&self.test) {
            Some("test")
        } else {
            None
        }
    }
}

/// Deterministic case-level partition. Validation and test sizes are
/// `floor(n · r / Σr)`; the remainder goes to training.
pub fn split_cases(case_ids: &[String], spec: &SplitSpec) -> Result<Split> {
    let total: u64 = spec.ratios.iter().map(|&r| r as u64).sum();
    if spec.ratios.contains(&0) {
        return Err(Error::Validation("split ratios must be positive".into()));
    }
    let mut ids: Vec<String> = case_ids.to_vec();
    ids.sort();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Validation("duplicate case id".into()));
    }
    let n = ids.len() as u64;
    let n_val = (n * spec.ratios[1] as u64 / total) as usize;
    let n_test = (n * spec.ratios[2] as u64 / total) as usize;
    if n_val == 0 || n_test == 0 {
        return Err(Error::Validation(format!(
            "{n} cases are too few for a {}:{}:{} split",
            spec.ratios[0], spec.ratios[1], spec.ratios[2]
        )));
    }
    let n_train = ids.len() - n_val - n_test;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    ids.shuffle(&mut rng);
    let mut train = ids[..n_train].to_vec();
    let mut val = ids[n_train..n_train + n_val].to_vec();
    let mut test = ids[n_train + n_val..].to_vec();
    train.sort();
    val.sort();
    test.sort();
    Ok(Split { train, val, test })
}

/// Parameters of the synthetic blob dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_cases: usize,
    #[serde(default = "default_slices")]
    pub slices_per_case: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of each case's slices (a contiguous z-range) holding a blob.
    #[serde(default = "default_positive_fraction")]
    pub positive_fraction: f64,
    #[serde(default = "default_radius")]
    pub radius: [usize; 2],
    #[serde(default = "default_contrast")]
    pub contrast: [f64; 2],
}

fn default_slices() -> usize {
    20
}
fn default_image_size() -> usize {
    64
}
fn default_positive_fraction() -> f64 {
    0.6
}
fn default_radius() -> [usize; 2] {
    [5, 11]
}
fn default_contrast() -> [f64; 2] {
    [0.5, 1.0]
}

impl SynthSpec {
    pub fn new(n_cases: usize, seed: u64) -> Self {
        Self {
            n_cases,
            slices_per_case: default_slices(),
            image_size: default_image_size(),
            seed,
            positive_fraction: default_positive_fraction(),
            radius: default_radius(),
            contrast: default_contrast(),
        }
    }
}

/// Parameters of one drawn blob; the mask is exactly `disc_mask` of these.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: (usize, usize),
    pub radius: usize,
    pub contrast: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub cases: Vec<VolumeRecord>,
    /// Per case, per slice: the blob drawn into that slice, if any.
    pub blobs: Vec<Vec<Option<Blob>>>,
}

/// Pixels whose centers lie within `radius` of `center`.
pub fn disc_mask(height: usize, width: usize, center: (usize, usize), radius: usize) -> BinaryMask {
    let r2 = (radius * radius) as isize;
    BinaryMask::from_fn(height, width, |y, x| {
        let dy = y as isize - center.0 as isize;
        let dx = x as isize - center.1 as isize;
        dy * dy + dx * dx <= r2
    })
}

/// Single-modality (T2-FLAIR) volumes of `image_size`² slices: an elliptic
/// "brain" with smooth texture and noise, and in a contiguous run of slices
/// one bright Gaussian blob with an exact disc mask. Fully determined by
/// the seed.
pub fn synth_blob_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    if spec.n_cases < 10 {
        return Err(Error::Validation("the synthetic dataset needs at least 10 cases".into()));
    }
    let size = spec.image_size;
    if size < 32 {
        return Err(Error::Validation("synthetic images must be at least 32 pixels".into()));
    }
    let [r_lo, r_hi] = spec.radius;
    if r_lo == 0 || r_lo > r_hi || 2 * r_hi + 8 >= size {
        return Err(Error::Validation(format!("radius range {r_lo}..={r_hi} does not fit")));
    }
    if !(0.0..=1.0).contains(&spec.positive_fraction) || spec.slices_per_case == 0 {
        return Err(Error::Validation("invalid slice layout".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, 0.03).expect("valid");
    let n_slices = spec.slices_per_case;
    let n_pos = math::round(spec.positive_fraction * n_slices as f64) as usize;
    let half = size as f64 / 2.0;
    let mut cases = Vec::with_capacity(spec.n_cases);
    let mut blobs = Vec::with_capacity(spec.n_cases);
    for case in 0..spec.n_cases {
        let start = if n_pos < n_slices { rng.random_range(0..=n_slices - n_pos) } else { 0 };
        let base = rng.random_range(0.25..0.45);
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.02..0.05),
                    rng.random_range(0.05..0.25),
                    rng.random_range(0.05..0.25),
                    rng.random_range(0.0..core::f64::consts::TAU),
                )
            })
            .collect();
        let (ey, ex) = (rng.random_range(0.8..0.95) * half, rng.random_range(0.8..0.95) * half);
        let mut data = Vec::with_capacity(n_slices * size * size);
        let mut mask = Vec::with_capacity(n_slices * size * size);
        let mut case_blobs = Vec::with_capacity(n_slices);
        for z in 0..n_slices {
            let blob = if (start..start + n_pos).contains(&z) {
                let radius = rng.random_range(r_lo..=r_hi);
                let margin = radius + 4;
                Some(Blob {
                    center: (
                        rng.random_range(margin..size - margin),
                        rng.random_range(margin..size - margin),
                    ),
                    radius,
                    contrast: rng.random_range(spec.contrast[0]..spec.contrast[1]),
                })
            } else {
                None
            };
            for y in 0..size {
                for x in 0..size {
                    let (fy, fx) = (y as f64 + 0.5 - half, x as f64 + 0.5 - half);
                    let inside = (fy / ey) * (fy / ey) + (fx / ex) * (fx / ex) <= 1.0;
                    let mut v = 0.0;
                    if inside {
                        v = base;
                        for &(amp, ky, kx, phase) in &waves {
                            v += amp * libm::sin(ky * y as f64 + kx * x as f64 + phase + 0.3 * z as f64);
                        }
                    }
                    v += noise.sample(&mut rng);
                    let mut m = false;
                    if let Some(b) = blob {
                        let dy = y as f64 - b.center.0 as f64;
                        let dx = x as f64 - b.center.1 as f64;
                        let d2 = dy * dy + dx * dx;
                        // The mask boundary is the blob's half-maximum contour.
                        let r2 = (b.radius * b.radius) as f64;
                        v += b.contrast * math::exp(-core::f64::consts::LN_2 * d2 / r2);
                        m = d2 <= (b.radius * b.radius) as f64;
                    }
                    data.push(v as f32);
                    mask.push(m);
                }
            }
            case_blobs.push(blob);
        }
        let mut modalities = BTreeMap::new();
        modalities.insert(Modality::Flair, Volume::new(n_slices, size, size, data)?);
        cases.push(VolumeRecord {
            case_id: format!("synth_{case:04}"),
            modalities,
            mask: Some(MaskVolume::new(n_slices, size, size, mask)?),
        });
        blobs.push(case_blobs);
    }
    Ok(SynthDataset { cases, blobs })
}

/// Slices every case of a dataset for one modality.
pub fn slice_all(
    cases: &[VolumeRecord],
    modality: Modality,
    policy: &SlicePolicy,
) -> Result<(Vec<SliceRecord>, Vec<EvalRecord>)> {
    let mut slices = Vec::new();
    let mut eval = Vec::new();
    for c in cases {
        let s = slice_volume(c, modality, None, policy)?;
        slices.extend(s.slices);
        eval.extend(s.eval.unwrap_or_default());
    }
    Ok((slices, eval))
}
