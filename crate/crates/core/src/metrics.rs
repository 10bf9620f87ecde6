//! Segmentation metrics.
//!
//! Empty-mask policy: two empty masks agree perfectly (Dice = IoU = 1,
//! HD95 = 0); exactly one empty mask scores Dice = IoU = 0 and HD95 equal
//! to the physical image diagonal.
//!
//! HD95 is computed on foreground pixel sets: the larger of the two
//! directed 95th percentiles of nearest-neighbour Euclidean distances,
//! with linear interpolation between order statistics.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cam::SaliencyMap;
use crate::error::{Error, Result};
use crate::math;

/// H×W boolean mask with physical pixel spacing `(row, col)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
    spacing: (f64, f64),
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {height}x{width} mask",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
            spacing: (1.0, 1.0),
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
            spacing: (1.0, 1.0),
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
            spacing: (1.0, 1.0),
        }
    }

    pub fn with_spacing(mut self, row: f64, col: f64) -> Result<Self> {
        if !(row > 0.0 && col > 0.0) || !row.is_finite() || !col.is_finite() {
            return Err(Error::Validation(format!("invalid spacing ({row}, {col})")));
        }
        self.spacing = (row, col);
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn spacing(&self) -> (f64, f64) {
        self.spacing
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Foreground pixel coordinates in row-major order.
    pub fn foreground(&self) -> Vec<(usize, usize)> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    /// Length of the image diagonal in physical units.
    pub fn diagonal(&self) -> f64 {
        let h = self.height as f64 * self.spacing.0;
        let w = self.width as f64 * self.spacing.1;
        math::sqrt(h * h + w * w)
    }
}

/// Dice, IoU and HD95 for one prediction/ground-truth pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub dice: f64,
    pub iou: f64,
    pub hd95: f64,
}

/// Population mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl SummaryStat {
    /// `"m±s"` with three decimals.
    pub fn render(&self) -> String {
        format!("{:.3}±{:.3}", self.mean, self.std)
    }
}

impl core::fmt::Display for SummaryStat {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{:.3}±{:.3}", self.mean, self.std)
    }
}

/// Pixel is foreground iff its value is strictly above `threshold`.
pub fn binarize(map: &SaliencyMap, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Validation(format!("threshold {threshold} must lie in (0, 1)")));
    }
    let (h, w) = map.shape();
    BinaryMask::new(h, w, map.data().iter().map(|&v| v > threshold).collect())
}

fn check_pair(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `(|A∩B|, |A|, |B|)`
fn counts(a: &BinaryMask, b: &BinaryMask) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut na = 0;
    let mut nb = 0;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    (inter, na, nb)
}

pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_pair(a, b)?;
    let (i, na, nb) = counts(a, b);
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * i as f64 / (na + nb) as f64)
}

pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_pair(a, b)?;
    let (i, na, nb) = counts(a, b);
    let union = na + nb - i;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(i as f64 / union as f64)
}

/// Percentile `q ∈ [0, 100]` of already sorted values, linear interpolation.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = math::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn directed_p95(mut d: Vec<f64>) -> f64 {
    d.sort_by(|x, y| x.partial_cmp(y).expect("distances are finite"));
    percentile_sorted(&d, 95.0)
}

/// Squared Euclidean distance from every pixel to the nearest foreground
/// pixel of `mask` (exact, separable lower-envelope transform). Returns
/// `None` for an empty mask.
pub fn squared_distance_transform(mask: &BinaryMask) -> Option<Vec<f64>> {
    if mask.is_empty() {
        return None;
    }
    let (h, w) = mask.shape();
    let (sr, sc) = mask.spacing();
    let mut f = vec![f64::INFINITY; h * w];
    // along rows (column direction)
    let mut line = vec![0.0; w.max(h)];
    let mut out = vec![0.0; w.max(h)];
    for y in 0..h {
        for x in 0..w {
            line[x] = if mask.at(y, x) { 0.0 } else { f64::INFINITY };
        }
        edt_1d(&line[..w], sc * sc, &mut out[..w]);
        f[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    // along columns
    for x in 0..w {
        for y in 0..h {
            line[y] = f[y * w + x];
        }
        edt_1d(&line[..h], sr * sr, &mut out[..h]);
        for y in 0..h {
            f[y * w + x] = out[y];
        }
    }
    Some(f)
}

/// 1D lower envelope of parabolas `f(q) + s2·(p − q)²` over the finite
/// samples of `f`.
fn edt_1d(f: &[f64], s2: f64, out: &mut [f64]) {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        out.iter_mut().for_each(|v| *v = f64::INFINITY);
        return;
    }
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    let intersect = |q: usize, p: usize| -> f64 {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf))
    };
    for &q in &sites {
        while let Some(&p) = v.last() {
            let s = intersect(q, p);
            if s <= z[v.len() - 1] {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
        } else {
            let s = intersect(q, *v.last().unwrap());
            v.push(q);
            z.push(s);
        }
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let pf = p as f64;
        while k + 1 < v.len() && z[k + 1] < pf {
            k += 1;
        }
        let d = pf - v[k] as f64;
        *o = f[v[k]] + s2 * d * d;
    }
}

fn empty_rules(a: &BinaryMask, b: &BinaryMask) -> Option<f64> {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => Some(0.0),
        (true, false) | (false, true) => Some(a.diagonal()),
        (false, false) => None,
    }
}

pub fn hd95(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_pair(a, b)?;
    if a.spacing() != b.spacing() {
        return Err(Error::Validation("masks have different pixel spacing".into()));
    }
    if let Some(v) = empty_rules(a, b) {
        return Ok(v);
    }
    let to_b = squared_distance_transform(b).expect("non-empty");
    let to_a = squared_distance_transform(a).expect("non-empty");
    let w = a.width();
    let da: Vec<f64> = a.foreground().iter().map(|&(y, x)| math::sqrt(to_b[y * w + x])).collect();
    let db: Vec<f64> = b.foreground().iter().map(|&(y, x)| math::sqrt(to_a[y * w + x])).collect();
    Ok(directed_p95(da).max(directed_p95(db)))
}

/// All-pairs reference implementation of [`hd95`].
pub fn hd95_bruteforce(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_pair(a, b)?;
    if a.spacing() != b.spacing() {
        return Err(Error::Validation("masks have different pixel spacing".into()));
    }
    if let Some(v) = empty_rules(a, b) {
        return Ok(v);
    }
    let (sr, sc) = a.spacing();
    let pa = a.foreground();
    let pb = b.foreground();
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| -> Vec<f64> {
        from.iter()
            .map(|&(y0, x0)| {
                to.iter()
                    .map(|&(y1, x1)| {
                        let dy = (y0 as f64 - y1 as f64) * sr;
                        let dx = (x0 as f64 - x1 as f64) * sc;
                        math::sqrt(dy * dy + dx * dx)
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    Ok(directed_p95(directed(&pa, &pb)).max(directed_p95(directed(&pb, &pa))))
}

pub fn metric_triple(pred: &BinaryMask, truth: &BinaryMask) -> Result<MetricTriple> {
    Ok(MetricTriple {
        dice: dice(pred, truth)?,
        iou: iou(pred, truth)?,
        hd95: hd95(pred, truth)?,
    })
}

/// Population mean and standard deviation (two-pass).
pub fn summarize(values: &[f64]) -> Result<SummaryStat> {
    if values.is_empty() {
        return Err(Error::Validation("cannot summarize an empty list".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("cannot summarize non-finite values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(SummaryStat {
        mean,
        std: math::sqrt(var),
        count: values.len(),
    })
}
