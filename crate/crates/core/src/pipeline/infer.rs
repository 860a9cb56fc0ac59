//! Full inference: decomposition, local lighting correction, restoration.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device};

use super::config::PipelineConfig;
use super::train::{load_decomposition, load_diffusion, load_restoration};
use crate::decomposition::DecompositionModel;
use crate::error::{Error, Result};
use crate::image::{images_to_tensor, masks_to_tensor, tensor_to_images, Image, Mask};
use crate::llc::LocalLightingCorrection;
use crate::restoration::RestorationModel;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointPaths {
    pub decomposition: PathBuf,
    pub diffusion: PathBuf,
    pub restoration: PathBuf,
}

impl CheckpointPaths {
    /// Conventional file names inside a run directory.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            decomposition: dir.join("decomposition.ckpt"),
            diffusion: dir.join("diffusion.ckpt"),
            restoration: dir.join("restoration.ckpt"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOutput {
    /// `Î` at the input's original size.
    pub prediction: Image,
    /// `R_s`, `L_s` and `L̂_s` at the working resolution.
    pub reflectance: Image,
    pub illumination: Image,
    pub corrected: Image,
}

impl InferOutput {
    pub fn intermediates(&self) -> [(&'static str, &Image); 3] {
        [
            ("reflectance", &self.reflectance),
            ("illumination", &self.illumination),
            ("corrected_illumination", &self.corrected),
        ]
    }
}

pub struct Pipeline {
    pub decomposition: DecompositionModel,
    pub diffusion: LocalLightingCorrection,
    pub restoration: RestorationModel,
    resolution: usize,
}

impl Pipeline {
    pub fn load(paths: &CheckpointPaths) -> Result<Self> {
        for p in [&paths.decomposition, &paths.diffusion, &paths.restoration] {
            if !p.exists() {
                return Err(Error::Checkpoint(format!(
                    "missing checkpoint {}",
                    p.display()
                )));
            }
        }
        let (decomposition, _) = load_decomposition(&paths.decomposition)?;
        let (diffusion, _) = load_diffusion(&paths.diffusion)?;
        let (restoration, cfg) = load_restoration(&paths.restoration)?;
        Ok(Self::from_parts(
            decomposition,
            diffusion,
            restoration,
            &cfg,
        ))
    }

    pub fn from_parts(
        decomposition: DecompositionModel,
        diffusion: LocalLightingCorrection,
        restoration: RestorationModel,
        cfg: &PipelineConfig,
    ) -> Self {
        Self {
            decomposition,
            diffusion,
            restoration,
            resolution: cfg.train.resolution,
        }
    }

    /// Side length inputs are resized to.
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn run(&self, image: &Image, mask: &Mask, seed: u64) -> Result<InferOutput> {
        if image.dims() != mask.dims() {
            return Err(Error::shape(image.dims(), mask.dims()));
        }
        let (h, w) = image.dims();
        let res = self.resolution;
        let dev = Device::Cpu;
        let dtype = DType::F32;
        let img = image.resize(res, res)?;
        let m = mask.resize(res, res)?;
        let i_s = images_to_tensor(&[&img], dtype, &dev)?;
        let mt = masks_to_tensor(&[&m], dtype, &dev)?;
        let pair = self.decomposition.shadow.decompose(&i_s, &mt)?.detach();
        let l_hat = self.diffusion.sample(&pair.illumination, &mt, seed)?;
        let out = self
            .restoration
            .net
            .restore(&pair.reflectance, &l_hat, &i_s, &mt)?;
        let first = |t| -> Result<Image> { Ok(tensor_to_images(t)?.remove(0)) };
        Ok(InferOutput {
            prediction: first(&out)?.resize(h, w)?,
            reflectance: first(&pair.reflectance)?,
            illumination: first(&pair.illumination)?,
            corrected: first(&l_hat)?,
        })
    }
}
