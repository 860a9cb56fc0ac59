//! Joint geometric augmentation of aligned layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{FlipAxis, Image, Mask, ShadowSample};

/// Training resolution used by the original large-scale runs.
pub const PAPER_RESOLUTION: usize = 256;
/// Default resolution for desk-scale runs.
pub const DESK_RESOLUTION: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Output side length after resize.
    pub resolution: usize,
    /// Fixed square crop side. `None` draws a side in
    /// `[min_crop_fraction * min(H, W), min(H, W)]`.
    pub crop: Option<usize>,
    pub min_crop_fraction: f64,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

impl AugmentConfig {
    pub fn desk() -> Self {
        Self::with_resolution(DESK_RESOLUTION)
    }

    pub fn paper() -> Self {
        Self::with_resolution(PAPER_RESOLUTION)
    }

    pub fn with_resolution(resolution: usize) -> Self {
        Self {
            resolution,
            crop: None,
            min_crop_fraction: 0.8,
            flip_horizontal: true,
            flip_vertical: true,
        }
    }

    /// Resize only.
    pub fn identity(resolution: usize) -> Self {
        Self {
            resolution,
            crop: None,
            min_crop_fraction: 1.0,
            flip_horizontal: false,
            flip_vertical: false,
        }
    }
}

/// Concrete transform drawn for one sample; applied identically to every
/// aligned layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transform {
    pub top: usize,
    pub left: usize,
    pub crop: usize,
    pub flip_h: bool,
    pub flip_v: bool,
    pub resolution: usize,
}

impl Transform {
    pub fn draw(dims: (usize, usize), seed: u64, cfg: &AugmentConfig) -> Result<Self> {
        let (h, w) = dims;
        let side = h.min(w);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let crop = match cfg.crop {
            Some(c) => {
                if c == 0 || c > h || c > w {
                    return Err(Error::InvalidParameter(format!(
                        "crop {c} larger than image {h}x{w}"
                    )));
                }
                c
            }
            None => {
                let lo = ((side as f64 * cfg.min_crop_fraction).ceil() as usize).clamp(1, side);
                rng.random_range(lo..=side)
            }
        };
        let top = rng.random_range(0..=h - crop);
        let left = rng.random_range(0..=w - crop);
        let flip_h = cfg.flip_horizontal && rng.random_bool(0.5);
        let flip_v = cfg.flip_vertical && rng.random_bool(0.5);
        Ok(Self {
            top,
            left,
            crop,
            flip_h,
            flip_v,
            resolution: cfg.resolution,
        })
    }

    pub fn apply_image(&self, img: &Image) -> Result<Image> {
        let mut out = img
            .crop(self.top, self.left, self.crop, self.crop)?
            .resize(self.resolution, self.resolution)?;
        if self.flip_h {
            out = out.flip(FlipAxis::Horizontal);
        }
        if self.flip_v {
            out = out.flip(FlipAxis::Vertical);
        }
        Ok(out)
    }

    pub fn apply_mask(&self, mask: &Mask) -> Result<Mask> {
        let mut out = mask
            .crop(self.top, self.left, self.crop, self.crop)?
            .resize(self.resolution, self.resolution)?;
        if self.flip_h {
            out = out.flip(FlipAxis::Horizontal);
        }
        if self.flip_v {
            out = out.flip(FlipAxis::Vertical);
        }
        Ok(out)
    }
}

/// Random crop, flip and resize applied to shadow, shadow-free and mask alike.
pub fn augment(sample: &ShadowSample, seed: u64, cfg: &AugmentConfig) -> Result<ShadowSample> {
    let t = Transform::draw(sample.dims(), seed, cfg)?;
    ShadowSample::new(
        t.apply_image(&sample.shadow)?,
        t.apply_image(&sample.shadow_free)?,
        t.apply_mask(&sample.mask)?,
        sample.id.clone(),
    )
}

pub fn flip_sample(sample: &ShadowSample, axis: FlipAxis) -> ShadowSample {
    ShadowSample {
        shadow: sample.shadow.flip(axis),
        shadow_free: sample.shadow_free.flip(axis),
        mask: sample.mask.flip(axis),
        id: sample.id.clone(),
    }
}
