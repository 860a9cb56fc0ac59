//! Illumination-guided texture restoration.
//!
//! At each scale the reflectance and illumination features are tiled into
//! `K×K` regions. Co-attention inside each region (queries from reflectance,
//! keys and values from illumination) gives `f_le = CoA(f_R, f_L) + f_R`.
//! A shift head then predicts per-pixel offsets from `f_le`, the illumination
//! features are bilinearly resampled at the shifted positions, and a second
//! co-attention gives `f_out = CoA(f_le, f̂_L) + f_le`.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, Conv2d, Linear, ParamStore};

pub const SCALES: usize = 5;
/// Region sizes from the finest to the deepest scale.
pub const DEFAULT_REGION_SIZES: [usize; SCALES] = [8, 8, 8, 8, 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IgtrVariant {
    #[serde(rename = "full")]
    Full,
    /// Local correspondence only.
    #[serde(rename = "igtr-l")]
    LocalOnly,
    /// Non-local correspondence only, offsets predicted from `f_R`.
    #[serde(rename = "igtr-g")]
    NonlocalOnly,
    /// Both stages with keys and values taken from `f_R`.
    #[serde(rename = "sa")]
    SelfAttention,
    /// Reflectance and illumination concatenated at the input; no fusion.
    #[serde(rename = "cat-i")]
    ConcatInput,
    /// Feature concatenation followed by a 1×1 convolution.
    #[serde(rename = "cat-f")]
    ConcatFeature,
}

impl IgtrVariant {
    pub const ALL: [IgtrVariant; 6] = [
        Self::Full,
        Self::LocalOnly,
        Self::NonlocalOnly,
        Self::SelfAttention,
        Self::ConcatInput,
        Self::ConcatFeature,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::LocalOnly => "igtr-l",
            Self::NonlocalOnly => "igtr-g",
            Self::SelfAttention => "sa",
            Self::ConcatInput => "cat-i",
            Self::ConcatFeature => "cat-f",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown IGTR variant {name:?}")))
    }

    /// Variants built from attention stages with residual connections.
    pub fn has_residual(self) -> bool {
        !matches!(self, Self::ConcatInput | Self::ConcatFeature)
    }

    fn local_stage(self) -> bool {
        matches!(self, Self::Full | Self::LocalOnly | Self::SelfAttention)
    }

    fn nonlocal_stage(self) -> bool {
        matches!(self, Self::Full | Self::NonlocalOnly | Self::SelfAttention)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IGTRConfig {
    pub region_sizes: Vec<usize>,
    pub variant: IgtrVariant,
}

impl Default for IGTRConfig {
    fn default() -> Self {
        Self {
            region_sizes: DEFAULT_REGION_SIZES.to_vec(),
            variant: IgtrVariant::Full,
        }
    }
}

impl IGTRConfig {
    /// Region size used at `scale` for an `h×w` map: the configured size,
    /// shrunk to the map if the map is smaller.
    pub fn region_size(&self, scale: usize, h: usize, w: usize) -> Result<usize> {
        let k = *self
            .region_sizes
            .get(scale)
            .ok_or_else(|| Error::Config(format!("no region size for scale {scale}")))?;
        let k = k.min(h).min(w);
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::IndivisibleSize {
                height: h,
                width: w,
                divisor: k,
            });
        }
        Ok(k)
    }
}

/// `(B, C, H, W)` → `(B·(H/K)·(W/K), K², C)`. Regions are ordered row-major
/// over the grid and tokens row-major inside each region.
pub fn partition_regions(f: &Tensor, k: usize) -> Result<Tensor> {
    let (b, c, h, w) = f.dims4()?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::IndivisibleSize {
            height: h,
            width: w,
            divisor: k,
        });
    }
    let (nh, nw) = (h / k, w / k);
    Ok(f.reshape(&[b, c, nh, k, nw, k][..])?
        .permute([0, 2, 4, 3, 5, 1])?
        .contiguous()?
        .reshape((b * nh * nw, k * k, c))?)
}

/// Inverse of [`partition_regions`].
pub fn unpartition_regions(
    tokens: &Tensor,
    b: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Result<Tensor> {
    let (n, t, c) = tokens.dims3()?;
    let (nh, nw) = (h / k, w / k);
    if n != b * nh * nw || t != k * k || h % k != 0 || w % k != 0 {
        return Err(Error::shape((b * nh * nw, k * k, c), tokens.dims()));
    }
    Ok(tokens
        .reshape(&[b, nh, nw, k, k, c][..])?
        .permute([0, 5, 1, 3, 2, 4])?
        .contiguous()?
        .reshape((b, c, h, w))?)
}

/// Single-head co-attention with 1×1 projections to half the channels and
/// a bias-free output projection back to the full width.
#[derive(Debug, Clone)]
pub struct CoAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    channels: usize,
}

impl CoAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        if channels < 2 || channels % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "co-attention needs an even channel count, got {channels}"
            )));
        }
        let d = channels / 2;
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.wq"), channels, d)?,
            wk: Linear::new(store, &format!("{name}.wk"), channels, d)?,
            wv: Linear::new(store, &format!("{name}.wv"), channels, d)?,
            wo: Linear::no_bias(store, &format!("{name}.wo"), d, channels)?,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Projected key dimension `d`.
    pub fn head_dim(&self) -> usize {
        self.channels / 2
    }

    /// Query, key, value and output projections.
    pub fn projections(&self) -> [&Linear; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }

    fn project(lin: &Linear, tokens: &Tensor) -> Result<Tensor> {
        let (n, t, c) = tokens.dims3()?;
        let y = lin.forward(&tokens.reshape((n * t, c))?)?;
        let out = y.dims()[1];
        Ok(y.reshape((n, t, out))?)
    }

    fn check(&self, q_src: &Tensor, kv_src: &Tensor) -> Result<()> {
        let (n, t, c) = q_src.dims3()?;
        if c != self.channels {
            return Err(Error::shape(self.channels, c));
        }
        if kv_src.dims() != [n, t, c] {
            return Err(Error::shape((n, t, c), kv_src.dims()));
        }
        Ok(())
    }

    /// Pre-softmax logits `QKᵀ/√d`, `(N, T, T)`.
    pub fn logits(&self, q_src: &Tensor, kv_src: &Tensor) -> Result<Tensor> {
        self.check(q_src, kv_src)?;
        let q = Self::project(&self.wq, q_src)?;
        let k = Self::project(&self.wk, kv_src)?;
        Ok((q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (self.head_dim() as f64).sqrt())?)
    }

    /// Row-stochastic attention weights.
    pub fn attention_weights(&self, q_src: &Tensor, kv_src: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::softmax(
            &self.logits(q_src, kv_src)?,
            D::Minus1,
        )?)
    }

    /// `S(QKᵀ/√d)·V` over region tokens, `(N, T, d)`.
    pub fn attend(&self, q_src: &Tensor, kv_src: &Tensor) -> Result<Tensor> {
        let a = self.attention_weights(q_src, kv_src)?;
        let v = Self::project(&self.wv, kv_src)?;
        Ok(a.matmul(&v)?)
    }

    /// Attention output mapped back to the full channel width, `(N, T, C)`.
    pub fn forward_tokens(&self, q_src: &Tensor, kv_src: &Tensor) -> Result<Tensor> {
        Self::project(&self.wo, &self.attend(q_src, kv_src)?)
    }

    /// Region-wise co-attention over `(B, C, H, W)` maps.
    pub fn forward_map(&self, f_q: &Tensor, f_kv: &Tensor, k: usize) -> Result<Tensor> {
        if f_q.dims() != f_kv.dims() {
            return Err(Error::shape(f_q.dims(), f_kv.dims()));
        }
        let (b, _, h, w) = f_q.dims4()?;
        let out = self.forward_tokens(&partition_regions(f_q, k)?, &partition_regions(f_kv, k)?)?;
        unpartition_regions(&out, b, h, w, k)
    }
}

/// `f_le = CoA(f_R, f_L) + f_R`.
pub fn local_enhance(coa: &CoAttention, f_r: &Tensor, f_l: &Tensor, k: usize) -> Result<Tensor> {
    Ok((coa.forward_map(f_r, f_l, k)? + f_r)?)
}

/// `f_out = CoA(f_le, f̂_L) + f_le`.
pub fn nonlocal_enhance(
    coa: &CoAttention,
    f_le: &Tensor,
    f_hat: &Tensor,
    k: usize,
) -> Result<Tensor> {
    Ok((coa.forward_map(f_le, f_hat, k)? + f_le)?)
}

/// Two-layer convolutional offset head. Output channel 0 is the horizontal
/// offset and channel 1 the vertical one, in pixels, bounded by `radius`.
#[derive(Debug, Clone)]
pub struct Shift {
    conv1: Conv2d,
    conv2: Conv2d,
    radius: f64,
}

impl Shift {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, radius: f64) -> Result<Self> {
        let hidden = (channels / 2).max(1);
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), channels, hidden, 3, 1, 1)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), hidden, 2, 3, 1, 1)?,
            radius,
        })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.conv1.forward(f)?)?;
        Ok((self.conv2.forward(&h)?.tanh()? * self.radius)?)
    }
}

/// Bilinear resampling of `f` (`(B, C, H, W)`) at `(x + dx, y + dy)`, with
/// `offsets` `(B, 2, H, W)` holding `(dx, dy)`. Coordinates are clamped to
/// the map; the output is differentiable in both `f` and the offsets.
pub fn resample(f: &Tensor, offsets: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = f.dims4()?;
    if offsets.dims4()? != (b, 2, h, w) {
        return Err(Error::shape((b, 2, h, w), offsets.dims()));
    }
    let norm = offsets
        .to_dtype(DType::F64)?
        .abs()?
        .max_all()?
        .to_scalar::<f64>()?;
    if !norm.is_finite() {
        return Err(Error::NonFinite { step: 0, norm });
    }
    let dev = f.device();
    let dt = f.dtype();
    let xs: Vec<f64> = (0..h * w).map(|p| (p % w) as f64).collect();
    let ys: Vec<f64> = (0..h * w).map(|p| (p / w) as f64).collect();
    let base_x = Tensor::from_vec(xs, (1, h * w), dev)?.to_dtype(dt)?;
    let base_y = Tensor::from_vec(ys, (1, h * w), dev)?.to_dtype(dt)?;
    let off = offsets.to_dtype(dt)?.reshape((b, 2, h * w))?;
    let px = off
        .narrow(1, 0, 1)?
        .squeeze(1)?
        .broadcast_add(&base_x)?
        .clamp(0.0, (w - 1) as f64)?;
    let py = off
        .narrow(1, 1, 1)?
        .squeeze(1)?
        .broadcast_add(&base_y)?
        .clamp(0.0, (h - 1) as f64)?;
    let x0 = px.detach().floor()?;
    let y0 = py.detach().floor()?;
    let wx = (&px - &x0)?;
    let wy = (&py - &y0)?;
    let x1 = (&x0 + 1.0)?.clamp(0.0, (w - 1) as f64)?;
    let y1 = (&y0 + 1.0)?.clamp(0.0, (h - 1) as f64)?;

    let flat = f.reshape((b, c, h * w))?;
    let gather = |yy: &Tensor, xx: &Tensor| -> Result<Tensor> {
        let idx = ((yy * w as f64)? + xx)?.to_dtype(DType::U32)?;
        let idx = idx
            .unsqueeze(1)?
            .broadcast_as((b, c, h * w))?
            .contiguous()?;
        Ok(flat.gather(&idx, 2)?)
    };
    let one_x = (1.0 - &wx)?;
    let one_y = (1.0 - &wy)?;
    let w00 = (&one_x * &one_y)?.unsqueeze(1)?;
    let w01 = (&wx * &one_y)?.unsqueeze(1)?;
    let w10 = (&one_x * &wy)?.unsqueeze(1)?;
    let w11 = (&wx * &wy)?.unsqueeze(1)?;
    let out = (gather(&y0, &x0)?.broadcast_mul(&w00)?
        + gather(&y0, &x1)?.broadcast_mul(&w01)?
        + gather(&y1, &x0)?.broadcast_mul(&w10)?
        + gather(&y1, &x1)?.broadcast_mul(&w11)?)?;
    Ok(out.reshape((b, c, h, w))?)
}

/// Fusion of reflectance and illumination features at one scale.
#[derive(Debug, Clone)]
pub struct IGTRBlock {
    variant: IgtrVariant,
    region: usize,
    local: Option<CoAttention>,
    nonlocal: Option<CoAttention>,
    shift: Option<Shift>,
    cat_proj: Option<Conv2d>,
}

impl IGTRBlock {
    /// `region` is the effective `K` at this scale; the shift radius is `K/2`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        region: usize,
        variant: IgtrVariant,
    ) -> Result<Self> {
        let local = if variant.local_stage() {
            Some(CoAttention::new(
                store,
                &format!("{name}.coa_local"),
                channels,
            )?)
        } else {
            None
        };
        let (nonlocal, shift) = if variant.nonlocal_stage() {
            (
                Some(CoAttention::new(
                    store,
                    &format!("{name}.coa_nonlocal"),
                    channels,
                )?),
                Some(Shift::new(
                    store,
                    &format!("{name}.shift"),
                    channels,
                    region as f64 / 2.0,
                )?),
            )
        } else {
            (None, None)
        };
        let cat_proj = if variant == IgtrVariant::ConcatFeature {
            Some(Conv2d::new(
                store,
                &format!("{name}.cat"),
                2 * channels,
                channels,
                1,
                1,
                0,
            )?)
        } else {
            None
        };
        Ok(Self {
            variant,
            region,
            local,
            nonlocal,
            shift,
            cat_proj,
        })
    }

    pub fn variant(&self) -> IgtrVariant {
        self.variant
    }

    pub fn region(&self) -> usize {
        self.region
    }

    pub fn forward(&self, f_r: &Tensor, f_l: &Tensor) -> Result<Tensor> {
        if f_r.dims() != f_l.dims() {
            return Err(Error::shape(f_r.dims(), f_l.dims()));
        }
        let k = self.region;
        match self.variant {
            IgtrVariant::ConcatInput => Ok(f_r.clone()),
            IgtrVariant::ConcatFeature => {
                let proj = self.cat_proj.as_ref().expect("cat-f projection");
                proj.forward(&Tensor::cat(&[f_r, f_l], 1)?)
            }
            v => {
                let kv = if v == IgtrVariant::SelfAttention {
                    f_r
                } else {
                    f_l
                };
                let f_le = match &self.local {
                    Some(coa) => local_enhance(coa, f_r, kv, k)?,
                    None => f_r.clone(),
                };
                match (&self.nonlocal, &self.shift) {
                    (Some(coa), Some(shift)) => {
                        let f_hat = resample(kv, &shift.forward(&f_le)?)?;
                        nonlocal_enhance(coa, &f_le, &f_hat, k)
                    }
                    _ => Ok(f_le),
                }
            }
        }
    }
}
