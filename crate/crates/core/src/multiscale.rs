//! Multi-scale test: run a CAM on resized copies of the input, bring each
//! map back to the original resolution, normalize per scale and fuse.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adapter::ClassifierHandle;
use crate::cam::{min_max_normalize, resize_tensor, upsample_bilinear, CamRequest, SaliencyMap};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{ImageTensor, Map2};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Mean,
    Max,
}

/// Scale factors and the pixelwise fusion rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleSpec {
    pub factors: Vec<f64>,
    #[serde(default)]
    pub fusion: Fusion,
}

impl Default for ScaleSpec {
    /// Original and doubled size, mean fusion.
    fn default() -> Self {
        Self {
            factors: vec![1.0, 2.0],
            fusion: Fusion::Mean,
        }
    }
}

impl ScaleSpec {
    pub fn single(factor: f64) -> Self {
        Self {
            factors: vec![factor],
            fusion: Fusion::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() {
            return Err(Error::Validation("at least one scale factor is required".into()));
        }
        for (i, &f) in self.factors.iter().enumerate() {
            if !(f > 0.0) || !f.is_finite() {
                return Err(Error::Validation(format!("scale factor {f} must be positive")));
            }
            if self.factors[..i].contains(&f) {
                return Err(Error::Validation(format!("duplicate scale factor {f}")));
            }
        }
        Ok(())
    }
}

/// Bilinear resize to `(round(f·H), round(f·W))`.
pub fn rescale_image(image: &ImageTensor, factor: f64) -> Result<ImageTensor> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::Validation(format!("scale factor {factor} must be positive")));
    }
    let h = math::round(factor * image.height() as f64) as usize;
    let w = math::round(factor * image.width() as f64) as usize;
    if h < 8 || w < 8 {
        return Err(Error::Validation(format!(
            "scaling by {factor} gives a degenerate {h}x{w} image"
        )));
    }
    resize_tensor(image, h, w)
}

/// Pixelwise mean or max of equally sized maps, then min-max normalized.
pub fn fuse_maps(maps: &[SaliencyMap], fusion: Fusion) -> Result<SaliencyMap> {
    min_max_normalize(&fuse_raw(maps, fusion)?)
}

/// The fused map before the final normalization.
pub fn fuse_raw(maps: &[SaliencyMap], fusion: Fusion) -> Result<Map2> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Validation("cannot fuse an empty list of maps".into()))?;
    let (h, w) = first.shape();
    if let Some(bad) = maps.iter().find(|m| m.shape() != (h, w)) {
        return Err(Error::Shape(format!(
            "cannot fuse a {:?} map with a {h}x{w} map",
            bad.shape()
        )));
    }
    let mut acc = first.map().clone();
    for m in &maps[1..] {
        for (a, &b) in acc.data_mut().iter_mut().zip(m.data()) {
            match fusion {
                Fusion::Mean => *a += b,
                Fusion::Max => *a = a.max(b),
            }
        }
    }
    if fusion == Fusion::Mean {
        let n = maps.len() as f64;
        acc.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok(acc)
}

/// Per-scale maps, each resized back to the input's spatial shape and
/// normalized.
pub fn per_scale_maps(
    request: &CamRequest,
    handle: &ClassifierHandle,
    image: &ImageTensor,
    scales: &ScaleSpec,
) -> Result<Vec<SaliencyMap>> {
    scales.validate()?;
    let (h, w) = (image.height(), image.width());
    scales
        .factors
        .iter()
        .map(|&f| {
            let scaled = rescale_image(image, f)?;
            let map = request.run(handle, &scaled)?;
            min_max_normalize(&upsample_bilinear(map.map(), h, w)?)
        })
        .collect()
}

pub fn multiscale_cam(
    request: &CamRequest,
    handle: &ClassifierHandle,
    image: &ImageTensor,
    scales: &ScaleSpec,
) -> Result<SaliencyMap> {
    fuse_maps(&per_scale_maps(request, handle, image, scales)?, scales.fusion)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor3;

    fn sal(rows: &[&[f64]]) -> SaliencyMap {
        SaliencyMap::new(Map2::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn scale_spec_validation() {
        assert!(ScaleSpec::default().validate().is_ok());
        let dup = ScaleSpec {
            factors: vec![1.0, 1.0],
            fusion: Fusion::Max,
        };
        assert!(dup.validate().is_err());
        assert!(ScaleSpec::single(0.0).validate().is_err());
        assert!(ScaleSpec { factors: vec![], fusion: Fusion::Mean }.validate().is_err());
    }

    #[test]
    fn rescale_identity_constant_and_ramp() {
        let img = Tensor3::from_fn(1, 9, 11, |_, y, x| (y * 11 + x) as f64);
        assert_eq!(rescale_image(&img, 1.0).unwrap(), img);
        let c = Tensor3::filled(2, 8, 8, 0.3);
        let up = rescale_image(&c, 2.0).unwrap();
        assert_eq!(up.shape(), (2, 16, 16));
        assert!(up.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert!(rescale_image(&c, 0.5).is_err());
    }

    #[test]
    fn rescale_ramp_hand_computed() {
        // 8×8 ramp with value = column; ×2 samples columns at
        // max(0, j/2 − 0.25) clamped to 7. Rows are unaffected.
        let img = Tensor3::from_fn(1, 8, 8, |_, _, x| x as f64);
        let up = rescale_image(&img, 2.0).unwrap();
        let want: Vec<f64> = (0..16)
            .map(|j| (j as f64 / 2.0 - 0.25).clamp(0.0, 7.0))
            .collect();
        for y in 0..16 {
            for x in 0..16 {
                assert!((up.at(0, y, x) - want[x]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ramp_4x4_doubles_to_known_columns() {
        let m = Map2::from_fn(4, 4, |_, x| x as f64);
        let up = upsample_bilinear(&m, 8, 8).unwrap();
        let want = [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0];
        for y in 0..8 {
            for x in 0..8 {
                assert!((up.at(y, x) - want[x]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fuse_examples() {
        let a = sal(&[&[0.0, 1.0]]);
        let b = sal(&[&[1.0, 0.0]]);
        assert_eq!(fuse_maps(core::slice::from_ref(&a), Fusion::Mean).unwrap(), a);
        assert_eq!(fuse_maps(&[a.clone(), b.clone()], Fusion::Mean).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(fuse_maps(&[a.clone(), b], Fusion::Max).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(fuse_maps(&[a.clone(), a.clone(), a.clone()], Fusion::Mean).unwrap(), a);
        assert!(fuse_maps(&[], Fusion::Mean).is_err());
        let c = sal(&[&[0.0], &[1.0]]);
        assert!(fuse_maps(&[a, c], Fusion::Max).is_err());
    }

    #[test]
    fn max_fusion_matches_loop_and_dominates() {
        let maps: Vec<SaliencyMap> = (0..3)
            .map(|s| {
                let m = Map2::from_fn(8, 8, |y, x| libm::sin((y * 8 + x + 17 * s) as f64 * 0.91) * 3.0);
                min_max_normalize(&m).unwrap()
            })
            .collect();
        let raw = fuse_raw(&maps, Fusion::Max).unwrap();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut want = vec![0.0; 64];
        for i in 0..64 {
            let mut v = f64::NEG_INFINITY;
            for m in &maps {
                v = v.max(m.data()[i]);
                assert!(raw.data()[i] >= m.data()[i]);
            }
            want[i] = v;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let fused = fuse_maps(&maps, Fusion::Max).unwrap();
        for i in 0..64 {
            assert!((fused.data()[i] - (want[i] - lo) / (hi - lo)).abs() < 1e-15);
        }
    }
}
