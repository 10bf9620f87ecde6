//! Figure images in the Netpbm formats: a greyscale PGM of the map and a
//! colour PPM overlay on the input slice.
//!
//! The overlay colour map is the fixed 256-entry table [`colormap`]: a jet
//! ramp with `r = clamp(1.5 − |4t − 3|)`, `g = clamp(1.5 − |4t − 2|)`,
//! `b = clamp(1.5 − |4t − 1|)` at `t = i/255`, each channel rounded to a
//! byte. Output bytes depend only on the map and image.

use std::path::Path;
use std::sync::OnceLock;

use cfdcam_core::{SaliencyMap, Tensor3};

use crate::error::{self, Error, Result};

/// Weight of the colour map in the overlay.
pub const OVERLAY_ALPHA: f64 = 0.5;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn colormap() -> &'static [[u8; 3]; 256] {
    static LUT: OnceLock<[[u8; 3]; 256]> = OnceLock::new();
    LUT.get_or_init(|| {
        let mut lut = [[0u8; 3]; 256];
        for (i, c) in lut.iter_mut().enumerate() {
            let t = i as f64 / 255.0;
            let ch = |k: f64| to_byte(1.5 - (4.0 * t - k).abs());
            *c = [ch(3.0), ch(2.0), ch(1.0)];
        }
        lut
    })
}

pub fn encode_pgm(map: &SaliencyMap) -> Vec<u8> {
    let (h, w) = map.shape();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| to_byte(v)));
    out
}

/// Saliency colours blended over the min-max scaled first image channel.
pub fn encode_overlay(image: &Tensor3, map: &SaliencyMap) -> Result<Vec<u8>> {
    let (h, w) = map.shape();
    if (image.height(), image.width()) != (h, w) {
        return Err(Error::Config(format!(
            "image is {}x{} but the map is {h}x{w}",
            image.height(),
            image.width()
        )));
    }
    let grey = image.channel(0);
    let lo = grey.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grey.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let lut = colormap();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for (&g, &s) in grey.iter().zip(map.data()) {
        let base = (g - lo) / span * 255.0;
        let color = lut[to_byte(s) as usize];
        for c in color {
            let v = (1.0 - OVERLAY_ALPHA) * base + OVERLAY_ALPHA * c as f64;
            out.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, map: &SaliencyMap) -> Result<()> {
    error::write(path, &encode_pgm(map))
}

pub fn write_overlay(path: &Path, image: &Tensor3, map: &SaliencyMap) -> Result<()> {
    error::write(path, &encode_overlay(image, map)?)
}
