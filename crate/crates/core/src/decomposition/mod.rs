//! Shadow-aware reflectance / illumination decomposition.
//!
//! One shared encoder feeds two decoders. The encoder is five stride-2
//! convolutions (kernel 4, padding 1) with instance norm and leaky ReLU; each
//! decoder mirrors it with transposed convolutions, instance norm and ReLU,
//! concatenating the encoder feature of matching resolution before every
//! layer but the first. Both heads end in a sigmoid so `R` and `L` lie in
//! `[0, 1]`.
//!
//! Training uses a second network of the same architecture on the shadow-free
//! image, fed an all-zero mask. It is discarded afterwards.

pub mod loss;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{images_to_tensor, masks_to_tensor, tensor_to_images, Image, Mask};
use crate::nn::{instance_norm, leaky_relu, sigmoid, Conv2d, ConvTranspose2d, ParamStore};

pub use loss::{
    loss_decomposition_total, loss_fidelity, loss_illumination, loss_reflectance, DecompLossConfig,
    DecompLosses,
};

pub const DEPTH: usize = 5;
pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PADDING: usize = 1;
/// Input spatial sizes must be multiples of this.
pub const SIZE_DIVISOR: usize = 1 << DEPTH;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompNetConfig {
    pub base_channels: usize,
    pub skip_connections: bool,
}

impl Default for DecompNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            skip_connections: true,
        }
    }
}

impl DecompNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 8 {
            return Err(Error::InvalidParameter(format!(
                "base_channels must be >= 8, got {}",
                self.base_channels
            )));
        }
        Ok(())
    }

    /// Encoder widths from the finest to the deepest scale.
    pub fn encoder_channels(&self) -> [usize; DEPTH] {
        std::array::from_fn(|i| self.base_channels * (1 << i).min(8))
    }
}

pub fn check_divisible(height: usize, width: usize) -> Result<()> {
    if height % SIZE_DIVISOR != 0 || width % SIZE_DIVISOR != 0 || height == 0 || width == 0 {
        return Err(Error::IndivisibleSize {
            height,
            width,
            divisor: SIZE_DIVISOR,
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct DecompositionPair {
    /// `(B, 3, H, W)` in `[0, 1]`.
    pub reflectance: Tensor,
    /// `(B, 3, H, W)` in `[0, 1]`.
    pub illumination: Tensor,
}

impl DecompositionPair {
    pub fn detach(&self) -> Self {
        Self {
            reflectance: self.reflectance.detach(),
            illumination: self.illumination.detach(),
        }
    }

    pub fn to_images(&self) -> Result<Vec<(Image, Image)>> {
        Ok(tensor_to_images(&self.reflectance)?
            .into_iter()
            .zip(tensor_to_images(&self.illumination)?)
            .collect())
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    layers: Vec<ConvTranspose2d>,
}

impl Decoder {
    fn new(store: &mut ParamStore, name: &str, cfg: &DecompNetConfig) -> Result<Self> {
        let enc = cfg.encoder_channels();
        let mut layers = Vec::with_capacity(DEPTH);
        let mut cin = enc[DEPTH - 1];
        for k in 0..DEPTH {
            if k > 0 && cfg.skip_connections {
                cin += enc[DEPTH - 1 - k];
            }
            let cout = if k + 1 < DEPTH { enc[DEPTH - 2 - k] } else { 3 };
            layers.push(ConvTranspose2d::new(
                store,
                &format!("{name}.{k}"),
                cin,
                cout,
                KERNEL,
                STRIDE,
                PADDING,
            )?);
            cin = cout;
        }
        Ok(Self { layers })
    }

    fn forward(&self, feats: &[Tensor], skip: bool) -> Result<Tensor> {
        let mut y = feats[DEPTH - 1].clone();
        for (k, layer) in self.layers.iter().enumerate() {
            if k > 0 && skip {
                y = Tensor::cat(&[&y, &feats[DEPTH - 1 - k]], 1)?;
            }
            y = layer.forward(&y)?;
            y = if k + 1 < DEPTH {
                instance_norm(&y)?.relu()?
            } else {
                sigmoid(&y)?
            };
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct DecompNet {
    cfg: DecompNetConfig,
    encoder: Vec<Conv2d>,
    reflectance: Decoder,
    illumination: Decoder,
}

impl DecompNet {
    /// Registers parameters under `name` in `store`.
    pub fn new(store: &mut ParamStore, name: &str, cfg: &DecompNetConfig) -> Result<Self> {
        cfg.validate()?;
        let enc = cfg.encoder_channels();
        let mut encoder = Vec::with_capacity(DEPTH);
        let mut cin = 4;
        for (i, &c) in enc.iter().enumerate() {
            encoder.push(Conv2d::new(
                store,
                &format!("{name}.enc.{i}"),
                cin,
                c,
                KERNEL,
                STRIDE,
                PADDING,
            )?);
            cin = c;
        }
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            reflectance: Decoder::new(store, &format!("{name}.dec_r"), cfg)?,
            illumination: Decoder::new(store, &format!("{name}.dec_l"), cfg)?,
        })
    }

    pub fn config(&self) -> &DecompNetConfig {
        &self.cfg
    }

    /// Encoder features, finest first. `input` is the image with the mask
    /// channel appended.
    pub fn encode(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = input.dims4()?;
        if c != 4 {
            return Err(Error::shape("4 input channels (RGB + mask)", c));
        }
        check_divisible(h, w)?;
        let mut feats = Vec::with_capacity(DEPTH);
        let mut x = input.clone();
        for conv in &self.encoder {
            x = leaky_relu(&instance_norm(&conv.forward(&x)?)?)?;
            feats.push(x.clone());
        }
        Ok(feats)
    }

    /// `image` is `(B, 3, H, W)`, `mask` is `(B, 1, H, W)`.
    pub fn decompose(&self, image: &Tensor, mask: &Tensor) -> Result<DecompositionPair> {
        let (b, _, h, w) = image.dims4()?;
        if mask.dims4()? != (b, 1, h, w) {
            return Err(Error::shape((b, 1, h, w), mask.dims()));
        }
        let input = Tensor::cat(&[image, &mask.to_dtype(image.dtype())?], 1)?;
        let feats = self.encode(&input)?;
        Ok(DecompositionPair {
            reflectance: self
                .reflectance
                .forward(&feats, self.cfg.skip_connections)?,
            illumination: self
                .illumination
                .forward(&feats, self.cfg.skip_connections)?,
        })
    }

    pub fn decompose_image(
        &self,
        image: &Image,
        mask: &Mask,
        dtype: DType,
    ) -> Result<(Image, Image)> {
        if image.dims() != mask.dims() {
            return Err(Error::shape(image.dims(), mask.dims()));
        }
        let dev = candle_core::Device::Cpu;
        let pair = self.decompose(
            &images_to_tensor(&[image], dtype, &dev)?,
            &masks_to_tensor(&[mask], dtype, &dev)?,
        )?;
        Ok(pair.to_images()?.remove(0))
    }
}

/// The shadow network and its training-only shadow-free twin. They share the
/// architecture but not the weights.
pub struct DecompositionModel {
    pub store: ParamStore,
    pub shadow: DecompNet,
    pub shadow_free: DecompNet,
}

impl DecompositionModel {
    pub const SHADOW: &'static str = "shadow";
    pub const SHADOW_FREE: &'static str = "shadow_free";

    pub fn new(cfg: &DecompNetConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::with_store(ParamStore::new(seed, dtype), cfg)
    }

    pub fn with_store(mut store: ParamStore, cfg: &DecompNetConfig) -> Result<Self> {
        let shadow = DecompNet::new(&mut store, Self::SHADOW, cfg)?;
        let shadow_free = DecompNet::new(&mut store, Self::SHADOW_FREE, cfg)?;
        Ok(Self {
            store,
            shadow,
            shadow_free,
        })
    }

    /// Decomposes a shadow-free batch through the twin with an all-zero mask.
    pub fn decompose_shadow_free(&self, image: &Tensor) -> Result<DecompositionPair> {
        let (b, _, h, w) = image.dims4()?;
        let zeros = Tensor::zeros((b, 1, h, w), image.dtype(), image.device())?;
        self.shadow_free.decompose(image, &zeros)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn input(b: usize, h: usize, w: usize, seed: u64) -> (Tensor, Tensor) {
        let mut s = ParamStore::new(seed, DType::F32);
        let img = crate::nn::sigmoid(&s.randn(&[b, 3, h, w]).unwrap()).unwrap();
        let mask = s
            .randn(&[b, 1, h, w])
            .unwrap()
            .ge(0.0)
            .unwrap()
            .to_dtype(DType::F32)
            .unwrap();
        (img, mask)
    }

    #[test]
    fn output_shapes_and_range() {
        let model = DecompositionModel::new(
            &DecompNetConfig {
                base_channels: 16,
                skip_connections: true,
            },
            0,
            DType::F32,
        )
        .unwrap();
        let (img, mask) = input(2, 64, 64, 1);
        let pair = model.shadow.decompose(&img, &mask).unwrap();
        assert_eq!(pair.reflectance.dims(), &[2, 3, 64, 64]);
        assert_eq!(pair.illumination.dims(), &[2, 3, 64, 64]);
        for t in [&pair.reflectance, &pair.illumination] {
            let lo = t.min_all().unwrap().to_scalar::<f32>().unwrap();
            let hi = t.max_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(lo >= 0.0 && hi <= 1.0);
        }
    }

    #[test]
    fn encoder_scales_halve() {
        let mut store = ParamStore::new(0, DType::F32);
        let net = DecompNet::new(&mut store, "n", &DecompNetConfig::default()).unwrap();
        let x = Tensor::zeros((1, 4, 256, 256), DType::F32, &Device::Cpu).unwrap();
        let sizes: Vec<usize> = net
            .encode(&x)
            .unwrap()
            .iter()
            .map(|f| f.dims()[2])
            .collect();
        assert_eq!(sizes, vec![128, 64, 32, 16, 8]);
    }

    #[test]
    fn indivisible_size_rejected() {
        let mut store = ParamStore::new(0, DType::F32);
        let net = DecompNet::new(&mut store, "n", &DecompNetConfig::default()).unwrap();
        let (img, mask) = input(1, 100, 100, 0);
        assert!(matches!(
            net.decompose(&img, &mask),
            Err(Error::IndivisibleSize { height: 100, .. })
        ));
        let (img, _) = input(1, 64, 64, 0);
        let (_, mask) = input(1, 32, 32, 0);
        assert!(matches!(
            net.decompose(&img, &mask),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn small_base_rejected() {
        let mut store = ParamStore::new(0, DType::F32);
        let cfg = DecompNetConfig {
            base_channels: 4,
            skip_connections: true,
        };
        assert!(DecompNet::new(&mut store, "n", &cfg).is_err());
    }

    #[test]
    fn deterministic_and_twins_differ() {
        let model = DecompositionModel::new(&DecompNetConfig::default(), 3, DType::F32).unwrap();
        let (img, mask) = input(1, 32, 32, 2);
        let a: Vec<f32> = model
            .shadow
            .decompose(&img, &mask)
            .unwrap()
            .illumination
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let b: Vec<f32> = model
            .shadow
            .decompose(&img, &mask)
            .unwrap()
            .illumination
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        assert_eq!(a, b);
        let zeros = mask.zeros_like().unwrap();
        let c: Vec<f32> = model
            .shadow_free
            .decompose(&img, &zeros)
            .unwrap()
            .illumination
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let d: Vec<f32> = model
            .decompose_shadow_free(&img)
            .unwrap()
            .illumination
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        assert_eq!(c, d);
        assert_ne!(a, c);
    }

    #[test]
    fn without_skips_builds() {
        let cfg = DecompNetConfig {
            base_channels: 8,
            skip_connections: false,
        };
        let model = DecompositionModel::new(&cfg, 0, DType::F32).unwrap();
        let (img, mask) = input(1, 32, 32, 2);
        assert_eq!(
            model
                .shadow
                .decompose(&img, &mask)
                .unwrap()
                .reflectance
                .dims(),
            &[1, 3, 32, 32]
        );
    }
}
