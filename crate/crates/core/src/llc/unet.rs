//! Noise prediction UNet: residual blocks with group norm and SiLU, a
//! sinusoidal time embedding added inside every block, strided-conv
//! downsampling and nearest-neighbour upsampling.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::fused::{channel_shift, upsample2};
use crate::nn::{silu, Conv2d, GroupNorm, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub base_channels: usize,
    /// Width multiplier per resolution, finest first.
    pub channel_mults: Vec<usize>,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            channel_mults: vec![1, 2, 2],
            groups: 4,
        }
    }
}

impl UNetConfig {
    pub fn paper() -> Self {
        Self {
            base_channels: 64,
            channel_mults: vec![1, 2, 4],
            groups: 32,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty()
            || self.base_channels == 0
            || self.channel_mults.contains(&0)
        {
            return Err(Error::InvalidParameter(
                "UNet needs at least one level and nonzero widths".into(),
            ));
        }
        for m in &self.channel_mults {
            if (self.base_channels * m) % self.groups != 0 {
                return Err(Error::InvalidParameter(format!(
                    "width {} not divisible by {} groups",
                    self.base_channels * m,
                    self.groups
                )));
            }
        }
        Ok(())
    }
}

/// Sinusoidal embedding of (possibly fractional) timesteps, `(B, dim)`.
pub fn timestep_embedding(t: &[f64], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| step * f).collect();
        data.extend(args.iter().map(|a| a.sin()));
        data.extend(args.iter().map(|a| a.cos()));
        data.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        tdim: usize,
        groups: usize,
    ) -> Result<Self> {
        let g_in = if cin % groups == 0 { groups } else { 1 };
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), g_in, cin)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, 1)?,
            temb: Linear::new(store, &format!("{name}.temb"), tdim, cout)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), groups, cout)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1)?,
            skip: if cin != cout {
                Some(Conv2d::new(
                    store,
                    &format!("{name}.skip"),
                    cin,
                    cout,
                    1,
                    1,
                    0,
                )?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        let h = channel_shift(&h, &self.temb.forward(temb)?)?;
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
    in_channels: usize,
    out_channels: usize,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<ResBlock>,
    downsample: Vec<Conv2d>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    upsample: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &UNetConfig,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.base_channels;
        let tdim = 4 * b;
        let widths: Vec<usize> = cfg.channel_mults.iter().map(|m| b * m).collect();
        let levels = widths.len();
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut ch = b;
        for (i, &w) in widths.iter().enumerate() {
            down.push(ResBlock::new(
                store,
                &format!("{name}.down.{i}"),
                ch,
                w,
                tdim,
                cfg.groups,
            )?);
            ch = w;
            if i + 1 < levels {
                downsample.push(Conv2d::new(
                    store,
                    &format!("{name}.downsample.{i}"),
                    ch,
                    ch,
                    3,
                    2,
                    1,
                )?);
            }
        }
        let mid = ResBlock::new(store, &format!("{name}.mid"), ch, ch, tdim, cfg.groups)?;
        let mut up = Vec::new();
        let mut upsample = Vec::new();
        for (k, i) in (0..levels).rev().enumerate() {
            up.push(ResBlock::new(
                store,
                &format!("{name}.up.{k}"),
                ch + widths[i],
                widths[i],
                tdim,
                cfg.groups,
            )?);
            ch = widths[i];
            if i > 0 {
                upsample.push(Conv2d::new(
                    store,
                    &format!("{name}.upsample.{k}"),
                    ch,
                    ch,
                    3,
                    1,
                    1,
                )?);
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            in_channels,
            out_channels,
            time1: Linear::new(store, &format!("{name}.time1"), b, tdim)?,
            time2: Linear::new(store, &format!("{name}.time2"), tdim, tdim)?,
            conv_in: Conv2d::new(store, &format!("{name}.conv_in"), in_channels, b, 3, 1, 1)?,
            down,
            downsample,
            mid,
            up,
            upsample,
            norm_out: GroupNorm::new(store, &format!("{name}.norm_out"), cfg.groups, ch)?,
            conv_out: Conv2d::new(
                store,
                &format!("{name}.conv_out"),
                ch,
                out_channels,
                3,
                1,
                1,
            )?,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// `x` is `(B, in_channels, H, W)`; `t` holds one timestep per batch item.
    pub fn forward(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        let (bsz, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(self.in_channels, c));
        }
        if t.len() != bsz {
            return Err(Error::shape(bsz, t.len()));
        }
        let d = self.cfg.size_divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::IndivisibleSize {
                height: h,
                width: w,
                divisor: d,
            });
        }
        let temb = timestep_embedding(t, self.cfg.base_channels, x.dtype(), x.device())?;
        let temb = self.time2.forward(&silu(&self.time1.forward(&temb)?)?)?;

        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (i, block) in self.down.iter().enumerate() {
            h = block.forward(&h, &temb)?;
            skips.push(h.clone());
            if let Some(ds) = self.downsample.get(i) {
                h = ds.forward(&h)?;
            }
        }
        h = self.mid.forward(&h, &temb)?;
        for (k, block) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = block.forward(&Tensor::cat(&[&h, &skip], 1)?, &temb)?;
            if let Some(us) = self.upsample.get(k) {
                h = us.forward(&upsample2(&h)?)?;
            }
        }
        let out = self.conv_out.forward(&silu(&self.norm_out.forward(&h)?)?)?;
        debug_assert_eq!(
            out.dims4()?,
            (bsz, self.out_channels, x.dims()[2], x.dims()[3])
        );
        Ok(out)
    }
}
