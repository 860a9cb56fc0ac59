//! Bilateral correction network and restoration loss.
//!
//! Reflectance and corrected illumination go through separate five-scale
//! encoders and are fused at every scale. A third, half-width encoder over
//! the shadow image and its mask supplies skip features to the decoder. The
//! head sees the decoded features together with the raw inputs and ends in a
//! sigmoid.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::decomposition::{check_divisible, DEPTH, KERNEL, PADDING, STRIDE};
use crate::error::{Error, Result};
use crate::igtr::{IGTRBlock, IGTRConfig, IgtrVariant};
use crate::nn::{instance_norm, leaky_relu, sigmoid, Conv2d, ConvTranspose2d, ParamStore};

pub const PERCEPTUAL_WEIGHT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    Igtr,
    CatI,
    CatF,
    /// `clamp(R_s ⊙ L̂_s)` with no learned restoration.
    Multiply,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilateralNetConfig {
    pub base_channels: usize,
    pub igtr: IGTRConfig,
    pub fusion: Fusion,
}

impl Default for BilateralNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            igtr: IGTRConfig::default(),
            fusion: Fusion::Igtr,
        }
    }
}

impl BilateralNetConfig {
    /// Ablation columns by name.
    pub const VARIANTS: [&'static str; 7] = [
        "multiply", "cat-i", "cat-f", "sa", "igtr-g", "igtr-l", "full",
    ];

    pub fn variant(name: &str) -> Result<Self> {
        let mut cfg = Self::default();
        if name == "multiply" {
            cfg.fusion = Fusion::Multiply;
            return Ok(cfg);
        }
        let v = IgtrVariant::from_name(name)?;
        cfg.igtr.variant = v;
        cfg.fusion = match v {
            IgtrVariant::ConcatInput => Fusion::CatI,
            IgtrVariant::ConcatFeature => Fusion::CatF,
            _ => Fusion::Igtr,
        };
        Ok(cfg)
    }

    pub fn variant_name(&self) -> &'static str {
        match self.fusion {
            Fusion::Multiply => "multiply",
            Fusion::CatI => "cat-i",
            Fusion::CatF => "cat-f",
            Fusion::Igtr => self.igtr.variant.name(),
        }
    }

    /// The per-scale block wiring implied by `fusion`.
    pub fn block_variant(&self) -> Result<IgtrVariant> {
        match self.fusion {
            Fusion::CatI => Ok(IgtrVariant::ConcatInput),
            Fusion::CatF => Ok(IgtrVariant::ConcatFeature),
            Fusion::Igtr if self.igtr.variant.has_residual() => Ok(self.igtr.variant),
            Fusion::Igtr => Err(Error::Config(format!(
                "fusion igtr needs an attention variant, got {}",
                self.igtr.variant.name()
            ))),
            Fusion::Multiply => Err(Error::Config("multiply has no fusion blocks".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 4 || self.base_channels % 4 != 0 {
            return Err(Error::InvalidParameter(format!(
                "base_channels must be a positive multiple of 4, got {}",
                self.base_channels
            )));
        }
        if self.igtr.region_sizes.len() != DEPTH {
            return Err(Error::Config(format!("need {DEPTH} region sizes")));
        }
        if self.fusion != Fusion::Multiply {
            self.block_variant()?;
        }
        Ok(())
    }

    pub fn channels(&self) -> [usize; DEPTH] {
        std::array::from_fn(|i| self.base_channels * (1 << i).min(8))
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    convs: Vec<Conv2d>,
}

impl Encoder {
    fn new(store: &mut ParamStore, name: &str, cin: usize, widths: &[usize]) -> Result<Self> {
        let mut convs = Vec::with_capacity(widths.len());
        let mut c = cin;
        for (i, &w) in widths.iter().enumerate() {
            convs.push(Conv2d::new(
                store,
                &format!("{name}.{i}"),
                c,
                w,
                KERNEL,
                STRIDE,
                PADDING,
            )?);
            c = w;
        }
        Ok(Self { convs })
    }

    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut feats = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for conv in &self.convs {
            h = leaky_relu(&instance_norm(&conv.forward(&h)?)?)?;
            feats.push(h.clone());
        }
        Ok(feats)
    }
}

#[derive(Debug, Clone)]
struct Learned {
    enc_r: Encoder,
    /// Absent for input-level concatenation, where `enc_r` sees both layers.
    enc_l: Option<Encoder>,
    enc_img: Encoder,
    blocks: Vec<IGTRBlock>,
    decoder: Vec<ConvTranspose2d>,
    head: Conv2d,
}

#[derive(Debug, Clone)]
pub struct BilateralNet {
    cfg: BilateralNetConfig,
    learned: Option<Learned>,
}

impl BilateralNet {
    /// Builds for inputs of `height×width`, which fixes the region size at
    /// every scale.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &BilateralNetConfig,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        check_divisible(height, width)?;
        if cfg.fusion == Fusion::Multiply {
            return Ok(Self {
                cfg: cfg.clone(),
                learned: None,
            });
        }
        let ch = cfg.channels();
        let half: Vec<usize> = ch.iter().map(|c| c / 2).collect();
        let variant = cfg.block_variant()?;
        let concat_input = cfg.fusion == Fusion::CatI;
        let enc_r = Encoder::new(
            store,
            &format!("{name}.enc_r"),
            if concat_input { 6 } else { 3 },
            &ch,
        )?;
        let enc_l = if concat_input {
            None
        } else {
            Some(Encoder::new(store, &format!("{name}.enc_l"), 3, &ch)?)
        };
        let enc_img = Encoder::new(store, &format!("{name}.enc_img"), 4, &half)?;
        let mut blocks = Vec::with_capacity(DEPTH);
        for (i, &c) in ch.iter().enumerate() {
            let (h, w) = (height >> (i + 1), width >> (i + 1));
            let k = cfg.igtr.region_size(i, h, w)?;
            blocks.push(IGTRBlock::new(
                store,
                &format!("{name}.igtr.{i}"),
                c,
                k,
                variant,
            )?);
        }
        let mut decoder = Vec::with_capacity(DEPTH);
        let mut cin = 0;
        for k in 0..DEPTH {
            let scale = DEPTH - 1 - k;
            cin += ch[scale] + half[scale];
            let cout = if scale > 0 {
                ch[scale - 1]
            } else {
                cfg.base_channels
            };
            decoder.push(ConvTranspose2d::new(
                store,
                &format!("{name}.dec.{k}"),
                cin,
                cout,
                KERNEL,
                STRIDE,
                PADDING,
            )?);
            cin = cout;
        }
        // zero head: training starts from Î = I_s
        let head = Conv2d::zeros(
            store,
            &format!("{name}.head"),
            cfg.base_channels + 9,
            3,
            3,
            1,
            1,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            learned: Some(Learned {
                enc_r,
                enc_l,
                enc_img,
                blocks,
                decoder,
                head,
            }),
        })
    }

    pub fn config(&self) -> &BilateralNetConfig {
        &self.cfg
    }

    /// Fused features per scale, finest first. Empty for `multiply`.
    pub fn fused_features(&self, r_s: &Tensor, l_hat: &Tensor) -> Result<Vec<Tensor>> {
        let Some(net) = &self.learned else {
            return Ok(Vec::new());
        };
        let (fr, fl) = match &net.enc_l {
            Some(enc_l) => (net.enc_r.forward(r_s)?, enc_l.forward(l_hat)?),
            None => {
                let f = net.enc_r.forward(&Tensor::cat(&[r_s, l_hat], 1)?)?;
                (f.clone(), f)
            }
        };
        net.blocks
            .iter()
            .zip(fr.iter().zip(&fl))
            .map(|(b, (r, l))| b.forward(r, l))
            .collect()
    }

    /// `Î = σ(logit(I_s) + Δ)` with `Δ` from the learned head, which starts
    /// at zero. All inputs are `(B, 3, H, W)` except `mask`, `(B, 1, H, W)`.
    pub fn restore(
        &self,
        r_s: &Tensor,
        l_hat: &Tensor,
        i_s: &Tensor,
        mask: &Tensor,
    ) -> Result<Tensor> {
        let dims = r_s.dims4()?;
        for t in [l_hat, i_s] {
            if t.dims4()? != dims {
                return Err(Error::shape(r_s.dims(), t.dims()));
            }
        }
        let (b, _, h, w) = dims;
        if mask.dims4()? != (b, 1, h, w) {
            return Err(Error::shape((b, 1, h, w), mask.dims()));
        }
        let Some(net) = &self.learned else {
            return Ok((r_s * l_hat)?.clamp(0.0, 1.0)?);
        };
        check_divisible(h, w)?;
        let fused = self.fused_features(r_s, l_hat)?;
        let img = net
            .enc_img
            .forward(&Tensor::cat(&[i_s, &mask.to_dtype(i_s.dtype())?], 1)?)?;
        let mut y: Option<Tensor> = None;
        for (k, layer) in net.decoder.iter().enumerate() {
            let scale = DEPTH - 1 - k;
            let mut parts = Vec::with_capacity(3);
            if let Some(prev) = &y {
                parts.push(prev);
            }
            parts.push(&fused[scale]);
            parts.push(&img[scale]);
            let x = Tensor::cat(&parts, 1)?;
            y = Some(instance_norm(&layer.forward(&x)?)?.relu()?);
        }
        let y = y.expect("decoder has layers");
        let delta = net.head.forward(&Tensor::cat(&[&y, r_s, l_hat, i_s], 1)?)?;
        sigmoid(&(logit(i_s)? + delta)?)
    }
}

/// Clamp margin keeping `logit` finite on saturated pixels.
const LOGIT_MARGIN: f64 = 1e-3;

fn logit(x: &Tensor) -> Result<Tensor> {
    let p = x.clamp(LOGIT_MARGIN, 1.0 - LOGIT_MARGIN)?;
    Ok((p.log()? - (1.0 - &p)?.log()?)?)
}

/// A frozen image feature extractor for the perceptual term.
pub trait FeatureExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// Extractor with no activations; the perceptual term vanishes.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoFeatures;

impl FeatureExtractor for NoFeatures {
    fn features(&self, _x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(Vec::new())
    }
}

/// Fixed randomly initialized conv pyramid (3×3 stride-2 convs with ReLU),
/// exposing each stage's activation.
#[derive(Debug, Clone)]
pub struct RandomConvPyramid {
    convs: Vec<Conv2d>,
}

impl RandomConvPyramid {
    pub const WIDTHS: [usize; 3] = [16, 32, 64];

    pub fn new(seed: u64, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(seed, dtype);
        let mut convs = Vec::new();
        let mut c = 3;
        for (i, &w) in Self::WIDTHS.iter().enumerate() {
            convs.push(Conv2d::new(&mut store, &format!("phi.{i}"), c, w, 3, 2, 1)?.frozen());
            c = w;
        }
        Ok(Self { convs })
    }
}

impl FeatureExtractor for RandomConvPyramid {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct RestoreLoss {
    pub pixel: Tensor,
    pub perceptual: Tensor,
    pub total: Tensor,
}

/// `‖Î − I_sf‖₁`, mean absolute error.
pub fn pixel_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(target.dims(), pred.dims()));
    }
    Ok((pred - target)?.abs()?.mean_all()?)
}

/// `‖Î − I_sf‖₁ + λ·Σ_l ‖φ_l(Î) − φ_l(I_sf)‖₁`.
pub fn loss_restoration(
    pred: &Tensor,
    target: &Tensor,
    extractor: &dyn FeatureExtractor,
    lambda: f64,
) -> Result<RestoreLoss> {
    let pixel = pixel_loss(pred, target)?;
    let fp = extractor.features(pred)?;
    let ft = extractor.features(&target.detach())?;
    let mut perceptual = Tensor::zeros((), pred.dtype(), pred.device())?;
    for (a, b) in fp.iter().zip(&ft) {
        perceptual = (perceptual + (a - b)?.abs()?.mean_all()?)?;
    }
    let total = (&pixel + (&perceptual * lambda)?)?;
    Ok(RestoreLoss {
        pixel,
        perceptual,
        total,
    })
}

pub const NET_NAME: &str = "bilateral";

pub struct RestorationModel {
    pub store: ParamStore,
    pub net: BilateralNet,
}

impl RestorationModel {
    pub fn new(
        cfg: &BilateralNetConfig,
        size: (usize, usize),
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        Self::with_store(ParamStore::new(seed, dtype), cfg, size)
    }

    pub fn with_store(
        mut store: ParamStore,
        cfg: &BilateralNetConfig,
        size: (usize, usize),
    ) -> Result<Self> {
        let net = BilateralNet::new(&mut store, NET_NAME, cfg, size.0, size.1)?;
        Ok(Self { store, net })
    }
}
