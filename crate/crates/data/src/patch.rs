use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};
use crate::image::ImageTensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    pub hflip: bool,
    pub vflip: bool,
}

impl Augment {
    pub const FLIPS: Augment = Augment {
        hflip: true,
        vflip: true,
    };
    pub const NONE: Augment = Augment {
        hflip: false,
        vflip: false,
    };
}

/// Crops the same random window from both images and applies the same
/// random flips to both, so GT and LQ pixels stay paired.
pub fn sample_patch(
    gt: &ImageTensor,
    lq: &ImageTensor,
    patch_size: usize,
    augment: Augment,
    seed: u64,
) -> Result<(ImageTensor, ImageTensor)> {
    if gt.dims() != lq.dims() {
        return Err(DataError::ShapeMismatch(gt.dims(), lq.dims()));
    }
    let (h, w) = gt.dims();
    if h < patch_size || w < patch_size || patch_size == 0 {
        return Err(DataError::TooSmall {
            height: h,
            width: w,
            min: patch_size,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.random_range(0..=h - patch_size);
    let left = rng.random_range(0..=w - patch_size);
    let hflip = augment.hflip && rng.random_bool(0.5);
    let vflip = augment.vflip && rng.random_bool(0.5);
    let transform = |img: &ImageTensor| -> Result<ImageTensor> {
        let mut p = img.crop(top, left, patch_size, patch_size)?;
        if hflip {
            p = p.flip_horizontal();
        }
        if vflip {
            p = p.flip_vertical();
        }
        Ok(p)
    };
    Ok((transform(gt)?, transform(lq)?))
}
