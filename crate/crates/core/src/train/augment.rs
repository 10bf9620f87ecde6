use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor3;

/// Random view generation for contrastive pretraining: integer translation
/// with zero fill, horizontal flip and affine intensity jitter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub max_shift: usize,
    pub flip: bool,
    /// Additive offset drawn from `±brightness`.
    pub brightness: f64,
    /// Multiplicative gain drawn from `1 ± contrast`.
    pub contrast: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            max_shift: 4,
            flip: true,
            brightness: 0.1,
            contrast: 0.1,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            max_shift: 0,
            flip: false,
            brightness: 0.0,
            contrast: 0.0,
        }
    }

    pub fn apply(&self, image: &Tensor3, rng: &mut impl Rng) -> Tensor3 {
        let (c, h, w) = image.shape();
        let s = self.max_shift as i64;
        let (dy, dx) = if s > 0 {
            (rng.random_range(-s..=s), rng.random_range(-s..=s))
        } else {
            (0, 0)
        };
        let flip = self.flip && rng.random_bool(0.5);
        let gain = if self.contrast > 0.0 {
            1.0 + rng.random_range(-self.contrast..self.contrast)
        } else {
            1.0
        };
        let offset = if self.brightness > 0.0 {
            rng.random_range(-self.brightness..self.brightness)
        } else {
            0.0
        };
        Tensor3::from_fn(c, h, w, |ch, y, x| {
            let sy = y as isize - dy as isize;
            let mut sx = x as isize - dx as isize;
            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                return 0.0;
            }
            if flip {
                sx = w as isize - 1 - sx;
            }
            image.at(ch, sy as usize, sx as usize) * gain + offset
        })
    }
}
