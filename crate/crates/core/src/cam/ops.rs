use alloc::format;
use alloc::vec::Vec;

use super::SaliencyMap;
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{ImageTensor, Map2, Tensor3};

/// `(x − min)/(max − min)`; a constant map becomes all zeros.
pub fn min_max_normalize(map: &Map2) -> Result<SaliencyMap> {
    if !map.is_finite() {
        return Err(Error::Validation("saliency input contains non-finite values".into()));
    }
    let mut out = map.clone();
    if let Some((lo, hi)) = map.min_max() {
        if hi > lo {
            let range = hi - lo;
            out.data_mut().iter_mut().for_each(|v| *v = (*v - lo) / range);
        } else {
            out.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(SaliencyMap::from_normalized(out))
}

/// Source sample position and blend weight for output index `i` under the
/// half-pixel-center convention, clamped at the borders.
#[inline]
fn source_coord(i: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (math::floor(src) as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let t = if i1 == i0 { 0.0 } else { src - i0 as f64 };
    (i0, i1, t)
}

/// Bilinear resize with half-pixel centers (same sampling as
/// `align_corners=False`). Works for both up- and down-sampling; an equal
/// size returns the input unchanged.
pub fn upsample_bilinear(map: &Map2, height: usize, width: usize) -> Result<Map2> {
    let (h, w) = map.shape();
    if height == 0 || width == 0 {
        return Err(Error::Validation(format!("cannot resize to {height}x{width}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::Validation("cannot resize an empty map".into()));
    }
    if (h, w) == (height, width) {
        return Ok(map.clone());
    }
    let cols: Vec<(usize, usize, f64)> = (0..width).map(|x| source_coord(x, w, width)).collect();
    let mut out = Map2::zeros(height, width);
    for y in 0..height {
        let (y0, y1, ty) = source_coord(y, h, height);
        for (x, &(x0, x1, tx)) in cols.iter().enumerate() {
            let top = map.at(y0, x0) * (1.0 - tx) + map.at(y0, x1) * tx;
            let bottom = map.at(y1, x0) * (1.0 - tx) + map.at(y1, x1) * tx;
            out.set(y, x, top * (1.0 - ty) + bottom * ty);
        }
    }
    Ok(out)
}

/// Resizes every channel of a tensor.
pub fn resize_tensor(t: &Tensor3, height: usize, width: usize) -> Result<Tensor3> {
    if t.shape().1 == height && t.shape().2 == width {
        return Ok(t.clone());
    }
    let maps = (0..t.channels())
        .map(|c| upsample_bilinear(&t.channel_map(c), height, width))
        .collect::<Result<Vec<_>>>()?;
    Tensor3::from_maps(&maps)
}

/// Per-channel elementwise product `X ∘ H`.
pub fn mask_input(image: &ImageTensor, saliency: &SaliencyMap) -> Result<ImageTensor> {
    let (_, h, w) = image.shape();
    if saliency.shape() != (h, w) {
        return Err(Error::Shape(format!(
            "mask {:?} does not cover a {h}x{w} image",
            saliency.shape()
        )));
    }
    let mut out = image.clone();
    for c in 0..out.channels() {
        for (v, m) in out.channel_mut(c).iter_mut().zip(saliency.data()) {
            *v *= m;
        }
    }
    Ok(out)
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Validation("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("softmax input contains non-finite values".into()));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| math::exp(z - m)).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `ReLU(Σ_k w_k A_k)` at the activations' native resolution.
pub fn weighted_sum_relu(maps: &Tensor3, weights: &[f64]) -> Result<Map2> {
    if weights.len() != maps.channels() {
        return Err(Error::Shape(format!(
            "{} weights for {} channels",
            weights.len(),
            maps.channels()
        )));
    }
    let mut acc = Map2::zeros(maps.height(), maps.width());
    for (k, &wk) in weights.iter().enumerate() {
        for (a, v) in acc.data_mut().iter_mut().zip(maps.channel(k)) {
            *a += wk * v;
        }
    }
    acc.data_mut().iter_mut().for_each(|v| *v = math::relu(*v));
    Ok(acc)
}
