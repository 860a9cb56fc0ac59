//! Image and mask containers plus the geometric primitives shared by the
//! augmentation pipeline and the evaluation protocol.
//!
//! Images are stored channel-planar (`CHW`) in `f64` with values in `[0, 1]`.
//! Masks are `u8` maps holding exactly 0 or 1, where 1 marks shadow.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Threshold used when a resampled mask is turned back into a binary map.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image from channel-planar data, rejecting values that are
    /// non-finite or outside `[0, 1]`.
    pub fn from_planar(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidParameter(format!(
                "image size must be positive, got {height}x{width}"
            )));
        }
        if data.len() != CHANNELS * height * width {
            return Err(Error::shape(CHANNELS * height * width, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!(
                "image value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Like [`Image::from_planar`] but clamps into `[0, 1]`; non-finite
    /// values are still rejected.
    pub fn from_planar_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite image value".into()));
        }
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Self::from_planar(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let plane = height * width;
        let mut data = Vec::with_capacity(CHANNELS * plane);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, plane));
        }
        Self::from_planar(height, width, data)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::from_planar(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    /// Applies `f` per value; the result is clamped back into `[0, 1]`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::from_planar_clamped(
            self.height,
            self.width,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let decoded = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        let rgb = match decoded {
            image::DynamicImage::ImageRgb8(rgb) => rgb,
            other => {
                return Err(Error::Decode {
                    path: path.to_path_buf(),
                    reason: format!("expected 8-bit RGB, found {:?}", other.color()),
                })
            }
        };
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        Self::from_fn(h, w, |c, y, x| {
            f64::from(rgb.get_pixel(x as u32, y as u32).0[c]) / 255.0
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf = image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            image::Rgb(p.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
        });
        buf.save(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if (height, width) == self.dims() {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            data.extend(resize_plane(
                self.plane(c),
                self.height,
                self.width,
                height,
                width,
            ));
        }
        Self::from_planar_clamped(height, width, data)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        check_crop(self.dims(), top, left, height, width)?;
        Self::from_fn(height, width, |c, y, x| self.get(c, top + y, left + x))
    }

    pub fn flip(&self, axis: FlipAxis) -> Self {
        let (h, w) = self.dims();
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..CHANNELS {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = axis.source(y, x, h, w);
                    data.push(self.get(c, sy, sx));
                }
            }
        }
        Self {
            height: h,
            width: w,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn from_binary(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidParameter(format!(
                "mask size must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::shape(height * width, data.len()));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidParameter("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self::from_binary(height, width, data)
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::from_binary(height, width, vec![0; height * width])
    }

    pub fn ones(height: usize, width: usize) -> Result<Self> {
        Self::from_binary(height, width, vec![1; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let decoded = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        let gray = match decoded {
            image::DynamicImage::ImageLuma8(g) => g,
            other => {
                return Err(Error::Decode {
                    path: path.to_path_buf(),
                    reason: format!(
                        "expected 8-bit single-channel mask, found {:?}",
                        other.color()
                    ),
                })
            }
        };
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        Self::from_fn(h, w, |y, x| gray.get_pixel(x as u32, y as u32).0[0] >= 128)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) {
                255
            } else {
                0
            }])
        });
        buf.save(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Bilinear resize followed by re-binarization at [`MASK_THRESHOLD`].
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if (height, width) == self.dims() {
            return Ok(self.clone());
        }
        let plane: Vec<f64> = self.data.iter().map(|&v| f64::from(v)).collect();
        let resized = resize_plane(&plane, self.height, self.width, height, width);
        Self::from_binary(
            height,
            width,
            resized
                .iter()
                .map(|&v| u8::from(v >= MASK_THRESHOLD))
                .collect(),
        )
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        check_crop(self.dims(), top, left, height, width)?;
        Self::from_fn(height, width, |y, x| self.get(top + y, left + x))
    }

    pub fn flip(&self, axis: FlipAxis) -> Self {
        let (h, w) = self.dims();
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = axis.source(y, x, h, w);
                data.push(self.data[sy * w + sx]);
            }
        }
        Self {
            height: h,
            width: w,
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    Horizontal,
    Vertical,
}

impl FlipAxis {
    fn source(self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            FlipAxis::Horizontal => (y, w - 1 - x),
            FlipAxis::Vertical => (h - 1 - y, x),
        }
    }
}

/// A paired shadow / shadow-free image with its shadow mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowSample {
    pub shadow: Image,
    pub shadow_free: Image,
    pub mask: Mask,
    pub id: String,
}

impl ShadowSample {
    pub fn new(
        shadow: Image,
        shadow_free: Image,
        mask: Mask,
        id: impl Into<String>,
    ) -> Result<Self> {
        if shadow.dims() != shadow_free.dims() || shadow.dims() != mask.dims() {
            return Err(Error::shape(
                shadow.dims(),
                format!(
                    "shadow_free {:?}, mask {:?}",
                    shadow_free.dims(),
                    mask.dims()
                ),
            ));
        }
        Ok(Self {
            shadow,
            shadow_free,
            mask,
            id: id.into(),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.shadow.dims()
    }
}

fn check_crop(
    dims: (usize, usize),
    top: usize,
    left: usize,
    height: usize,
    width: usize,
) -> Result<()> {
    if height == 0 || width == 0 || top + height > dims.0 || left + width > dims.1 {
        return Err(Error::InvalidParameter(format!(
            "crop {height}x{width}+{top}+{left} does not fit in {}x{}",
            dims.0, dims.1
        )));
    }
    Ok(())
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_plane(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let sy = sh as f64 / dh as f64;
    let sx = sw as f64 / dw as f64;
    let axis = |d: usize, scale: f64, n: usize| {
        let pos = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, pos - i0 as f64)
    };
    let cols: Vec<_> = (0..dw).map(|x| axis(x, sx, sw)).collect();
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let (y0, y1, wy) = axis(y, sy, sh);
        for &(x0, x1, wx) in &cols {
            let top = src[y0 * sw + x0] * (1.0 - wx) + src[y0 * sw + x1] * wx;
            let bottom = src[y1 * sw + x0] * (1.0 - wx) + src[y1 * sw + x1] * wx;
            out.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    out
}

/// Stacks images into a `(B, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty image batch".into()))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
    for img in images {
        if img.dims() != (h, w) {
            return Err(Error::shape((h, w), img.dims()));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::from_vec(data, (images.len(), CHANNELS, h, w), device)?.to_dtype(dtype)?)
}

/// Stacks masks into a `(B, 1, H, W)` tensor of 0/1 values.
pub fn masks_to_tensor(masks: &[&Mask], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty mask batch".into()))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.dims() != (h, w) {
            return Err(Error::shape((h, w), m.dims()));
        }
        data.extend(m.data().iter().map(|&v| f64::from(v)));
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

/// Splits a `(B, 3, H, W)` tensor back into images, clamping into `[0, 1]`.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (b, c, h, w) = t.dims4()?;
    if c != CHANNELS {
        return Err(Error::shape(CHANNELS, c));
    }
    let flat: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    flat.chunks_exact(c * h * w)
        .take(b)
        .map(|chunk| Image::from_planar_clamped(h, w, chunk.to_vec()))
        .collect()
}
