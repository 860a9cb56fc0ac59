//! The three sequential training stages.
//!
//! Every step draws its batch, augmentation and noise from an RNG seeded by
//! `(seed, stage, step)` alone, so a run resumed from a checkpoint replays
//! exactly the steps an uninterrupted run would have taken.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use crate::augment::{AugmentConfig, Transform};
use crate::checkpoint::Checkpoint;
use crate::decomposition::loss::DecompLosses;
use crate::decomposition::DecompositionModel;
use crate::error::{Error, Result};
use crate::image::{
    images_to_tensor, masks_to_tensor, tensor_to_images, Image, Mask, ShadowSample,
};
use crate::llc::LocalLightingCorrection;
use crate::nn::{grad_norm, randn, Adam, ParamStore};
use crate::restoration::{
    loss_restoration, RandomConvPyramid, RestorationModel, PERCEPTUAL_WEIGHT,
};
use crate::synth::derive_seed;

pub const DECOMP_KIND: &str = "decomposition";
pub const DIFFUSION_KIND: &str = "diffusion";
pub const RESTORE_KIND: &str = "restoration";

const DTYPE: DType = DType::F32;

// Stream tags for seed derivation.
const INIT_STREAM: u64 = 0x1000;
const BATCH_STREAM: u64 = 0x2000;
const PROBE_STREAM: u64 = 0x3000;
const CACHE_STREAM: u64 = 0x4000;
const EXTRACTOR_STREAM: u64 = 0x5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Decomposition,
    Diffusion,
    Restoration,
}

impl Stage {
    fn kind(self) -> &'static str {
        match self {
            Stage::Decomposition => DECOMP_KIND,
            Stage::Diffusion => DIFFUSION_KIND,
            Stage::Restoration => RESTORE_KIND,
        }
    }

    fn index(self) -> u64 {
        self as u64
    }

    fn total(self, cfg: &PipelineConfig) -> usize {
        match self {
            Stage::Decomposition => cfg.train.iters_decomp,
            Stage::Diffusion => cfg.train.iters_diffusion,
            Stage::Restoration => cfg.train.iters_restore,
        }
    }
}

fn stage_seed(cfg: &PipelineConfig, stage: Stage, stream: u64) -> u64 {
    derive_seed(cfg.train.seed, stream + stage.index())
}

fn step_rng(cfg: &PipelineConfig, stage: Stage, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(
        stage_seed(cfg, stage, BATCH_STREAM),
        step as u64,
    ))
}

#[derive(Debug, Clone, Default)]
pub struct StageOptions {
    /// Continue from the checkpoint at the output path if one exists.
    pub resume: bool,
    /// Stop (and checkpoint) after this many steps in total.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub kind: String,
    pub checkpoint: PathBuf,
    pub sha256: String,
    pub steps: usize,
    pub total_steps: usize,
    pub trainable_params: usize,
    /// Training loss of every step taken, resumed steps included.
    pub losses: Vec<f64>,
    /// Loss on a fixed batch before the first and after the last step.
    pub probe_initial: f64,
    pub probe_final: f64,
}

impl StageReport {
    pub fn finished(&self) -> bool {
        self.steps == self.total_steps
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Extra {
    losses: Vec<f64>,
    probe_initial: f64,
    upstream: Vec<(String, String)>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn restore_params(store: &ParamStore, tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
    if tensors.len() != store.vars().count() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model has {}",
            tensors.len(),
            store.vars().count()
        )));
    }
    for (name, shape, data) in tensors {
        let t = Tensor::from_vec(data.clone(), shape.as_slice(), store.device())?;
        store.set(name, &t)?;
    }
    Ok(())
}

/// A parameter store filled from `ck`'s `model.` tensors; build the network
/// on it afterwards and check with [`check_complete`].
fn store_from(ck: &Checkpoint) -> Result<(ParamStore, usize)> {
    let tensors = ck.tensors_with_prefix("model");
    let mut store = ParamStore::new(0, DTYPE);
    store.import(&tensors)?;
    Ok((store, tensors.len()))
}

fn check_complete(store: &ParamStore, loaded: usize, path: &Path) -> Result<()> {
    if store.vars().count() != loaded {
        return Err(Error::Checkpoint(format!(
            "{} does not match the configured network ({} tensors, network has {})",
            path.display(),
            loaded,
            store.vars().count()
        )));
    }
    Ok(())
}

fn warn_unfinished(ck: &Checkpoint, path: &Path, total: usize) {
    if ck.step < total {
        log::warn!("{} stopped at step {} of {total}", path.display(), ck.step);
    }
}

/// The decomposition networks stored at `path`, with the config they were
/// trained under.
pub fn load_decomposition(path: &Path) -> Result<(DecompositionModel, PipelineConfig)> {
    let ck = Checkpoint::load(path, DECOMP_KIND)?;
    let cfg = PipelineConfig::from_json(&ck.config)?;
    warn_unfinished(&ck, path, cfg.train.iters_decomp);
    let (store, n) = store_from(&ck)?;
    let model = DecompositionModel::with_store(store, &cfg.decomp)?;
    check_complete(&model.store, n, path)?;
    Ok((model, cfg))
}

pub fn load_diffusion(path: &Path) -> Result<(LocalLightingCorrection, PipelineConfig)> {
    let ck = Checkpoint::load(path, DIFFUSION_KIND)?;
    let cfg = PipelineConfig::from_json(&ck.config)?;
    warn_unfinished(&ck, path, cfg.train.iters_diffusion);
    let (store, n) = store_from(&ck)?;
    let model = LocalLightingCorrection::with_store(store, &cfg.llc)?;
    check_complete(&model.store, n, path)?;
    Ok((model, cfg))
}

pub fn load_restoration(path: &Path) -> Result<(RestorationModel, PipelineConfig)> {
    let ck = Checkpoint::load(path, RESTORE_KIND)?;
    let cfg = PipelineConfig::from_json(&ck.config)?;
    warn_unfinished(&ck, path, cfg.train.iters_restore);
    let (store, n) = store_from(&ck)?;
    let res = cfg.train.resolution;
    let model = RestorationModel::with_store(store, &cfg.restore, (res, res))?;
    check_complete(&model.store, n, path)?;
    Ok((model, cfg))
}

struct Loop<'a> {
    stage: Stage,
    cfg: &'a PipelineConfig,
    store: &'a ParamStore,
    path: &'a Path,
    upstream: Vec<(String, String)>,
}

impl Loop<'_> {
    fn save(&self, step: usize, adam: &Adam, losses: &[f64], probe_initial: f64) -> Result<String> {
        let mut ck = Checkpoint::new(self.stage.kind(), self.cfg.to_json());
        ck.step = step;
        ck.add_tensors("model", self.store.export()?);
        ck.add_tensors("adam", adam.export()?);
        ck.extra = serde_json::to_value(Extra {
            losses: losses.to_vec(),
            probe_initial,
            upstream: self.upstream.clone(),
        })
        .expect("plain data");
        ck.save(self.path)
    }

    fn run(
        self,
        opts: &StageOptions,
        mut loss_at: impl FnMut(usize) -> Result<Tensor>,
        probe: impl Fn() -> Result<f64>,
    ) -> Result<StageReport> {
        let train = &self.cfg.train;
        // A network without parameters has nothing to optimize.
        let total = if self.store.is_empty() {
            0
        } else {
            self.stage.total(self.cfg)
        };
        let mut adam = Adam::new(train.adam_beta1, train.adam_beta2);
        let (mut step, mut losses, probe_initial) = if opts.resume && self.path.exists() {
            let ck = Checkpoint::load(self.path, self.stage.kind())?;
            if ck.config != self.cfg.to_json() {
                return Err(Error::Checkpoint(format!(
                    "{} was written under a different config",
                    self.path.display()
                )));
            }
            restore_params(self.store, &ck.tensors_with_prefix("model"))?;
            adam.import(ck.step, &ck.tensors_with_prefix("adam"), self.store)?;
            let extra: Extra = serde_json::from_value(ck.extra)
                .map_err(|e| Error::Checkpoint(format!("bad checkpoint extras: {e}")))?;
            log::info!("{}: resuming at step {}", self.stage.kind(), ck.step);
            (ck.step, extra.losses, extra.probe_initial)
        } else {
            (0, Vec::new(), probe()?)
        };
        let end = opts.stop_after.map_or(total, |s| s.min(total));
        if step < end {
            let sched = train.lr_schedule(total)?;
            while step < end {
                let loss = loss_at(step)?;
                let value = scalar(&loss)?;
                if !value.is_finite() {
                    self.save(step, &adam, &losses, probe_initial)?;
                    return Err(Error::NonFinite { step, norm: value });
                }
                let grads = loss.backward()?;
                let norm = grad_norm(self.store, &grads)?;
                if !norm.is_finite() {
                    self.save(step, &adam, &losses, probe_initial)?;
                    return Err(Error::NonFinite { step, norm });
                }
                if !adam.step(self.store, &grads, sched.lr(step))? {
                    self.save(step, &adam, &losses, probe_initial)?;
                    return Err(Error::NonFinite { step, norm });
                }
                losses.push(value);
                step += 1;
                if step % 100 == 0 {
                    log::info!("{} step {step}/{total} loss {value:.5}", self.stage.kind());
                }
                if train.checkpoint_every > 0 && step % train.checkpoint_every == 0 && step < end {
                    self.save(step, &adam, &losses, probe_initial)?;
                }
            }
        }
        let probe_final = probe()?;
        let sha256 = self.save(step, &adam, &losses, probe_initial)?;
        Ok(StageReport {
            kind: self.stage.kind().to_string(),
            checkpoint: self.path.to_path_buf(),
            sha256,
            steps: step,
            total_steps: total,
            trainable_params: self.store.num_params(),
            losses,
            probe_initial,
            probe_final,
        })
    }
}

/// Aligned training layers of one sample. `extra` carries cached network
/// outputs that must follow the same crop and flip.
struct Layers<'a> {
    shadow: &'a Image,
    shadow_free: &'a Image,
    mask: &'a Mask,
    extra: Vec<&'a Image>,
}

struct Batch {
    shadow: Tensor,
    shadow_free: Tensor,
    mask: Tensor,
    extra: Vec<Tensor>,
}

fn make_batch(layers: &[Layers], transforms: &[Transform]) -> Result<Batch> {
    let mut s = Vec::new();
    let mut sf = Vec::new();
    let mut m = Vec::new();
    let n_extra = layers[0].extra.len();
    let mut ex: Vec<Vec<Image>> = vec![Vec::new(); n_extra];
    for (l, t) in layers.iter().zip(transforms) {
        s.push(t.apply_image(l.shadow)?);
        sf.push(t.apply_image(l.shadow_free)?);
        m.push(t.apply_mask(l.mask)?);
        for (dst, img) in ex.iter_mut().zip(&l.extra) {
            dst.push(t.apply_image(img)?);
        }
    }
    let dev = candle_core::Device::Cpu;
    let stack = |v: &[Image]| images_to_tensor(&v.iter().collect::<Vec<_>>(), DTYPE, &dev);
    Ok(Batch {
        shadow: stack(&s)?,
        shadow_free: stack(&sf)?,
        mask: masks_to_tensor(&m.iter().collect::<Vec<_>>(), DTYPE, &dev)?,
        extra: ex.iter().map(|v| stack(v)).collect::<Result<_>>()?,
    })
}

/// Random batch for `step`: indices with replacement and one transform each.
fn random_batch(layers: &[Layers], rng: &mut ChaCha8Rng, cfg: &PipelineConfig) -> Result<Batch> {
    let aug = AugmentConfig::with_resolution(cfg.train.resolution);
    let mut picked = Vec::with_capacity(cfg.train.batch_size);
    let mut transforms = Vec::with_capacity(cfg.train.batch_size);
    for _ in 0..cfg.train.batch_size {
        let i = rng.random_range(0..layers.len());
        transforms.push(Transform::draw(layers[i].mask.dims(), rng.random(), &aug)?);
        picked.push(Layers {
            shadow: layers[i].shadow,
            shadow_free: layers[i].shadow_free,
            mask: layers[i].mask,
            extra: layers[i].extra.clone(),
        });
    }
    make_batch(&picked, &transforms)
}

/// The first `batch_size` samples, resized without augmentation.
fn probe_batch(layers: &[Layers], cfg: &PipelineConfig) -> Result<Batch> {
    let aug = AugmentConfig::identity(cfg.train.resolution);
    let n = cfg.train.batch_size.min(layers.len());
    let transforms = layers[..n]
        .iter()
        .map(|l| Transform::draw(l.mask.dims(), 0, &aug))
        .collect::<Result<Vec<_>>>()?;
    make_batch(&layers[..n], &transforms)
}

fn plain_layers(data: &[ShadowSample]) -> Vec<Layers<'_>> {
    data.iter()
        .map(|s| Layers {
            shadow: &s.shadow,
            shadow_free: &s.shadow_free,
            mask: &s.mask,
            extra: Vec::new(),
        })
        .collect()
}

fn check_inputs(cfg: &PipelineConfig, data: &[ShadowSample]) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidParameter("training set is empty".into()));
    }
    Ok(())
}

fn decomp_total(model: &DecompositionModel, b: &Batch, cfg: &PipelineConfig) -> Result<Tensor> {
    let s = model.shadow.decompose(&b.shadow, &b.mask)?;
    let sf = model.decompose_shadow_free(&b.shadow_free)?;
    let l = DecompLosses::compute(
        &s.reflectance,
        &s.illumination,
        &b.shadow,
        &sf.reflectance,
        &sf.illumination,
        &b.shadow_free,
        &cfg.decomp_loss,
    )?;
    Ok(l.total)
}

/// Optimizes the decomposition loss jointly over the shadow network and its
/// shadow-free twin.
pub fn train_decomposition(
    cfg: &PipelineConfig,
    data: &[ShadowSample],
    out: &Path,
    opts: &StageOptions,
) -> Result<StageReport> {
    check_inputs(cfg, data)?;
    let stage = Stage::Decomposition;
    let model = DecompositionModel::new(&cfg.decomp, stage_seed(cfg, stage, INIT_STREAM), DTYPE)?;
    let layers = plain_layers(data);
    let probe = probe_batch(&layers, cfg)?;
    Loop {
        stage,
        cfg,
        store: &model.store,
        path: out,
        upstream: Vec::new(),
    }
    .run(
        opts,
        |step| {
            let b = random_batch(&layers, &mut step_rng(cfg, stage, step), cfg)?;
            decomp_total(&model, &b, cfg)
        },
        || scalar(&decomp_total(&model, &probe, cfg)?),
    )
}

/// Illumination layers `(L_s, L_sf)` of a batch through frozen decomposition
/// networks.
fn illumination_pair(decomp: &DecompositionModel, b: &Batch) -> Result<(Tensor, Tensor)> {
    let l_s = decomp
        .shadow
        .decompose(&b.shadow, &b.mask)?
        .illumination
        .detach();
    let l_sf = decomp
        .decompose_shadow_free(&b.shadow_free)?
        .illumination
        .detach();
    Ok((l_s, l_sf))
}

fn diffusion_loss(
    llc: &LocalLightingCorrection,
    l_s: &Tensor,
    l_sf: &Tensor,
    mask: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let steps = llc.train_schedule().steps();
    let t: Vec<usize> = (0..l_s.dims()[0])
        .map(|_| rng.random_range(1..=steps))
        .collect();
    let eps = randn(rng, l_s.dims(), l_s.dtype(), l_s.device())?;
    Ok(llc.training_loss(l_s, l_sf, mask, &t, &eps)?.value)
}

/// Optimizes the masked denoising loss with `x0 = L_sf`; the decomposition
/// networks stay frozen.
pub fn train_diffusion(
    cfg: &PipelineConfig,
    data: &[ShadowSample],
    decomp_ckpt: &Path,
    out: &Path,
    opts: &StageOptions,
) -> Result<StageReport> {
    check_inputs(cfg, data)?;
    let stage = Stage::Diffusion;
    let (decomp, _) = load_decomposition(decomp_ckpt)?;
    let llc = LocalLightingCorrection::new(&cfg.llc, stage_seed(cfg, stage, INIT_STREAM), DTYPE)?;
    let layers = plain_layers(data);
    let pb = probe_batch(&layers, cfg)?;
    let (probe_ls, probe_lsf) = illumination_pair(&decomp, &pb)?;
    let probe_seed = stage_seed(cfg, stage, PROBE_STREAM);
    Loop {
        stage,
        cfg,
        store: &llc.store,
        path: out,
        upstream: vec![(
            DECOMP_KIND.into(),
            crate::checkpoint::file_sha256(decomp_ckpt)?,
        )],
    }
    .run(
        opts,
        |step| {
            let mut rng = step_rng(cfg, stage, step);
            let b = random_batch(&layers, &mut rng, cfg)?;
            let (l_s, l_sf) = illumination_pair(&decomp, &b)?;
            diffusion_loss(&llc, &l_s, &l_sf, &b.mask, &mut rng)
        },
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
            scalar(&diffusion_loss(
                &llc, &probe_ls, &probe_lsf, &pb.mask, &mut rng,
            )?)
        },
    )
}

/// Per-sample restoration inputs computed once by the frozen upstream
/// networks at the training resolution.
pub struct RestoreCache {
    pub shadow: Vec<Image>,
    pub shadow_free: Vec<Image>,
    pub mask: Vec<Mask>,
    pub reflectance: Vec<Image>,
    pub corrected: Vec<Image>,
}

impl RestoreCache {
    pub fn build(
        cfg: &PipelineConfig,
        data: &[ShadowSample],
        decomp: &DecompositionModel,
        llc: &LocalLightingCorrection,
    ) -> Result<Self> {
        let res = cfg.train.resolution;
        let mut cache = Self {
            shadow: Vec::new(),
            shadow_free: Vec::new(),
            mask: Vec::new(),
            reflectance: Vec::new(),
            corrected: Vec::new(),
        };
        let base = stage_seed(cfg, Stage::Restoration, CACHE_STREAM);
        for (k, chunk) in data.chunks(cfg.train.batch_size).enumerate() {
            let s: Vec<Image> = chunk
                .iter()
                .map(|x| x.shadow.resize(res, res))
                .collect::<Result<_>>()?;
            let sf: Vec<Image> = chunk
                .iter()
                .map(|x| x.shadow_free.resize(res, res))
                .collect::<Result<_>>()?;
            let m: Vec<Mask> = chunk
                .iter()
                .map(|x| x.mask.resize(res, res))
                .collect::<Result<_>>()?;
            let dev = candle_core::Device::Cpu;
            let st = images_to_tensor(&s.iter().collect::<Vec<_>>(), DTYPE, &dev)?;
            let mt = masks_to_tensor(&m.iter().collect::<Vec<_>>(), DTYPE, &dev)?;
            let pair = decomp.shadow.decompose(&st, &mt)?.detach();
            let l_hat = llc.sample(&pair.illumination, &mt, derive_seed(base, k as u64))?;
            cache
                .reflectance
                .extend(tensor_to_images(&pair.reflectance)?);
            cache.corrected.extend(tensor_to_images(&l_hat)?);
            cache.shadow.extend(s);
            cache.shadow_free.extend(sf);
            cache.mask.extend(m);
        }
        Ok(cache)
    }

    fn layers(&self) -> Vec<Layers<'_>> {
        (0..self.mask.len())
            .map(|i| Layers {
                shadow: &self.shadow[i],
                shadow_free: &self.shadow_free[i],
                mask: &self.mask[i],
                extra: vec![&self.reflectance[i], &self.corrected[i]],
            })
            .collect()
    }
}

fn restore_loss(
    model: &RestorationModel,
    extractor: &RandomConvPyramid,
    b: &Batch,
) -> Result<Tensor> {
    let pred = model
        .net
        .restore(&b.extra[0], &b.extra[1], &b.shadow, &b.mask)?;
    Ok(loss_restoration(&pred, &b.shadow_free, extractor, PERCEPTUAL_WEIGHT)?.total)
}

/// Optimizes the restoration loss on cached `(R_s, L̂_s)` from the frozen
/// upstream stages. With `fusion = multiply` there is nothing to train and
/// the checkpoint only records the configuration.
pub fn train_restore(
    cfg: &PipelineConfig,
    data: &[ShadowSample],
    decomp_ckpt: &Path,
    diffusion_ckpt: &Path,
    out: &Path,
    opts: &StageOptions,
) -> Result<StageReport> {
    check_inputs(cfg, data)?;
    let stage = Stage::Restoration;
    let (decomp, _) = load_decomposition(decomp_ckpt)?;
    let (llc, _) = load_diffusion(diffusion_ckpt)?;
    let res = cfg.train.resolution;
    let model = RestorationModel::new(
        &cfg.restore,
        (res, res),
        stage_seed(cfg, stage, INIT_STREAM),
        DTYPE,
    )?;
    let extractor = RandomConvPyramid::new(stage_seed(cfg, stage, EXTRACTOR_STREAM), DTYPE)?;
    let cache = RestoreCache::build(cfg, data, &decomp, &llc)?;
    let layers = cache.layers();
    let pb = probe_batch(&layers, cfg)?;
    Loop {
        stage,
        cfg,
        store: &model.store,
        path: out,
        upstream: vec![
            (
                DECOMP_KIND.into(),
                crate::checkpoint::file_sha256(decomp_ckpt)?,
            ),
            (
                DIFFUSION_KIND.into(),
                crate::checkpoint::file_sha256(diffusion_ckpt)?,
            ),
        ],
    }
    .run(
        opts,
        |step| {
            let b = random_batch(&layers, &mut step_rng(cfg, stage, step), cfg)?;
            restore_loss(&model, &extractor, &b)
        },
        || scalar(&restore_loss(&model, &extractor, &pb)?),
    )
}
