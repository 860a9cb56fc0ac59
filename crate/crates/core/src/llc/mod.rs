//! Local lighting correction: a conditional denoising diffusion model over
//! the illumination layer that only regenerates the shadow region.
//!
//! Timesteps are 1-based throughout, `t ∈ [1, T]`.

pub mod unet;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{randn, ParamStore};

pub use unet::{timestep_embedding, UNet, UNetConfig};

pub const TRAIN_PRESET: &str = "train-1000";
pub const TEST_PRESET: &str = "test-50";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleSpec {
    pub const TRAIN: Self = Self {
        steps: 1000,
        beta_start: 1e-4,
        beta_end: 0.02,
    };
    pub const TEST: Self = Self {
        steps: 50,
        beta_start: 1e-4,
        beta_end: 0.5,
    };

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            TRAIN_PRESET => Ok(Self::TRAIN),
            TEST_PRESET => Ok(Self::TEST),
            other => Err(Error::Config(format!(
                "unknown schedule preset {other:?}, expected {TRAIN_PRESET} or {TEST_PRESET}"
            ))),
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Linear variance schedule with its cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "schedule needs T >= 1 and 0 < beta_start <= beta_end < 1, got ({steps}, {beta_start}, {beta_end})"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule {
        spec: ScheduleSpec {
            steps,
            beta_start,
            beta_end,
        },
        betas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidParameter(format!(
                "timestep {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// The timestep of `self` whose `ᾱ` is closest to `alpha_bar`.
    pub fn nearest_step(&self, alpha_bar: f64) -> usize {
        let mut best = 1;
        for t in 1..=self.steps() {
            if (self.alpha_bar(t) - alpha_bar).abs() < (self.alpha_bar(best) - alpha_bar).abs() {
                best = t;
            }
        }
        best
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`, one timestep per batch item, no clamping.
pub fn forward_diffuse(
    x0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        return Err(Error::shape(x0.dims(), eps.dims()));
    }
    let b = x0.dims()[0];
    if t.len() != b {
        return Err(Error::shape(b, t.len()));
    }
    for &step in t {
        sched.check(step)?;
    }
    let mut coef_shape = vec![1; x0.rank()];
    coef_shape[0] = b;
    let coef = |f: &dyn Fn(usize) -> f64| -> Result<Tensor> {
        let v: Vec<f64> = t.iter().map(|&s| f(s)).collect();
        Ok(Tensor::from_vec(v, coef_shape.as_slice(), x0.device())?.to_dtype(x0.dtype())?)
    };
    let signal = coef(&|s| sched.alpha_bar(s).sqrt())?;
    let noise = coef(&|s| (1.0 - sched.alpha_bar(s)).sqrt())?;
    Ok((x0.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?)
}

fn check_mask(x: &Tensor, mask: &Tensor) -> Result<()> {
    let (b, _, h, w) = x.dims4()?;
    let (mb, mc, mh, mw) = mask.dims4()?;
    if (mb, mh, mw) != (b, h, w) || (mc != 1 && mc != x.dims()[1]) {
        return Err(Error::shape((b, 1, h, w), mask.dims()));
    }
    Ok(())
}

/// `C_t = M∗x_t + (1−M)∗x0`; `mask` is `(B, 1, H, W)` or full-channel.
pub fn build_condition(x_t: &Tensor, x0: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if x_t.dims() != x0.dims() {
        return Err(Error::shape(x0.dims(), x_t.dims()));
    }
    check_mask(x_t, mask)?;
    let m = mask.to_dtype(x_t.dtype())?;
    let inv = (1.0 - &m)?;
    Ok((x_t.broadcast_mul(&m)? + x0.broadcast_mul(&inv)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionMode {
    /// `[x_t, L_s]`
    LsOnly,
    /// `[x_t, L_s, I_m]`
    LsPlusMask,
    /// `[C_t, L_s]`
    LsPlusCt,
}

impl ConditionMode {
    pub const ALL: [ConditionMode; 3] = [Self::LsOnly, Self::LsPlusMask, Self::LsPlusCt];

    pub fn name(self) -> &'static str {
        match self {
            Self::LsOnly => "ls-only",
            Self::LsPlusMask => "ls-plus-mask",
            Self::LsPlusCt => "ls-plus-ct",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown condition_mode {name:?}")))
    }

    pub fn input_channels(self) -> usize {
        match self {
            Self::LsOnly | Self::LsPlusCt => 6,
            Self::LsPlusMask => 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenoiseRange {
    Local,
    Global,
}

impl DenoiseRange {
    pub fn name(self) -> &'static str {
        match self {
            Self::Local => "local",
            Self::Global => "global",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "local" => Ok(Self::Local),
            "global" => Ok(Self::Global),
            other => Err(Error::Config(format!("unknown denoise_range {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LLCConfig {
    pub condition_mode: ConditionMode,
    pub denoise_range: DenoiseRange,
    pub schedule_train: ScheduleSpec,
    pub schedule_test: ScheduleSpec,
    pub unet: UNetConfig,
}

impl Default for LLCConfig {
    fn default() -> Self {
        Self {
            condition_mode: ConditionMode::LsPlusCt,
            denoise_range: DenoiseRange::Local,
            schedule_train: ScheduleSpec::TRAIN,
            schedule_test: ScheduleSpec::TEST,
            unet: UNetConfig::default(),
        }
    }
}

impl LLCConfig {
    /// Ablation rows by name: `a`–`d` and `ours`.
    pub const VARIANTS: [&'static str; 5] = ["a", "b", "c", "d", "ours"];

    pub fn variant(name: &str) -> Result<Self> {
        let (condition_mode, denoise_range) = match name {
            "a" => (ConditionMode::LsOnly, DenoiseRange::Global),
            "b" => (ConditionMode::LsOnly, DenoiseRange::Local),
            "c" => (ConditionMode::LsPlusMask, DenoiseRange::Global),
            "d" => (ConditionMode::LsPlusMask, DenoiseRange::Local),
            "ours" | "full" => (ConditionMode::LsPlusCt, DenoiseRange::Local),
            other => {
                return Err(Error::Config(format!(
                    "unknown diffusion variant {other:?}"
                )))
            }
        };
        Ok(Self {
            condition_mode,
            denoise_range,
            ..Self::default()
        })
    }
}

/// Noise-net input for the configured condition mode.
pub fn assemble_input(
    mode: ConditionMode,
    x_t: &Tensor,
    x0: &Tensor,
    l_s: &Tensor,
    mask: &Tensor,
) -> Result<Tensor> {
    if l_s.dims() != x_t.dims() {
        return Err(Error::shape(x_t.dims(), l_s.dims()));
    }
    let m = mask.to_dtype(x_t.dtype())?;
    Ok(match mode {
        ConditionMode::LsOnly => Tensor::cat(&[x_t, l_s], 1)?,
        ConditionMode::LsPlusMask => Tensor::cat(&[x_t, l_s, &m], 1)?,
        ConditionMode::LsPlusCt => Tensor::cat(&[&build_condition(x_t, x0, mask)?, l_s], 1)?,
    })
}

#[derive(Debug, Clone)]
pub struct DenoiseLoss {
    pub value: Tensor,
    /// The local loss met an all-zero mask and was defined as 0.
    pub empty_mask: bool,
}

/// Squared error between `eps` and `eps_hat`, averaged over mask-interior
/// pixels and channels (local) or over everything (global).
pub fn denoise_loss(
    eps: &Tensor,
    eps_hat: &Tensor,
    mask: &Tensor,
    range: DenoiseRange,
) -> Result<DenoiseLoss> {
    if eps.dims() != eps_hat.dims() {
        return Err(Error::shape(eps.dims(), eps_hat.dims()));
    }
    let sq = (eps - eps_hat)?.sqr()?;
    match range {
        DenoiseRange::Global => Ok(DenoiseLoss {
            value: sq.mean_all()?,
            empty_mask: false,
        }),
        DenoiseRange::Local => {
            check_mask(eps, mask)?;
            let m = mask.to_dtype(eps.dtype())?;
            let channels = if m.dims()[1] == 1 { eps.dims()[1] } else { 1 };
            let count = m.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()? * channels as f64;
            let masked = sq.broadcast_mul(&m)?.sum_all()?;
            if count == 0.0 {
                log::warn!("denoise loss over an empty mask is defined as 0");
                return Ok(DenoiseLoss {
                    value: (masked * 0.0)?,
                    empty_mask: true,
                });
            }
            Ok(DenoiseLoss {
                value: (masked / count)?,
                empty_mask: false,
            })
        }
    }
}

/// The noise network plus the configuration that fixes its wiring.
pub struct LocalLightingCorrection {
    pub cfg: LLCConfig,
    pub store: ParamStore,
    pub net: UNet,
    train: NoiseSchedule,
    test: NoiseSchedule,
}

pub const NET_NAME: &str = "eps";

impl LocalLightingCorrection {
    pub fn new(cfg: &LLCConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::with_store(ParamStore::new(seed, dtype), cfg)
    }

    pub fn with_store(mut store: ParamStore, cfg: &LLCConfig) -> Result<Self> {
        let net = UNet::new(
            &mut store,
            NET_NAME,
            &cfg.unet,
            cfg.condition_mode.input_channels(),
            3,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            net,
            train: cfg.schedule_train.build()?,
            test: cfg.schedule_test.build()?,
        })
    }

    pub fn train_schedule(&self) -> &NoiseSchedule {
        &self.train
    }

    pub fn test_schedule(&self) -> &NoiseSchedule {
        &self.test
    }

    /// Predicted noise for `x_t` at training timesteps `t` with clean
    /// reference `x0` (the target illumination while training, `L_s` while
    /// sampling).
    pub fn predict(
        &self,
        x_t: &Tensor,
        x0: &Tensor,
        l_s: &Tensor,
        mask: &Tensor,
        t: &[f64],
    ) -> Result<Tensor> {
        let input = assemble_input(self.cfg.condition_mode, x_t, x0, l_s, mask)?;
        self.net.forward(&input, t)
    }

    /// Loss of one training step with `x0 = L_sf`, given drawn `t` and `ε`.
    pub fn training_loss(
        &self,
        l_s: &Tensor,
        l_sf: &Tensor,
        mask: &Tensor,
        t: &[usize],
        eps: &Tensor,
    ) -> Result<DenoiseLoss> {
        let x_t = forward_diffuse(l_sf, t, eps, &self.train)?;
        let tf: Vec<f64> = t.iter().map(|&s| s as f64).collect();
        let eps_hat = self.predict(&x_t, l_sf, l_s, mask, &tf)?;
        denoise_loss(eps, &eps_hat, mask, self.cfg.denoise_range)
    }

    /// Training timestep fed to the time embedding at test step `t`.
    pub fn embedding_step(&self, t: usize) -> usize {
        self.train.nearest_step(self.test.alpha_bar(t))
    }

    /// Ancestral sampling over the test schedule with `x0 = L_s`. For the
    /// local range the result keeps `L_s` outside the mask bit-exactly.
    pub fn sample(&self, l_s: &Tensor, mask: &Tensor, seed: u64) -> Result<Tensor> {
        check_mask(l_s, mask)?;
        let local = self.cfg.denoise_range == DenoiseRange::Local;
        let inside = mask.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
        if local && inside == 0.0 {
            return Ok(l_s.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sched = &self.test;
        let mut x = randn(&mut rng, l_s.dims(), l_s.dtype(), l_s.device())?;
        let b = l_s.dims()[0];
        for t in (1..=sched.steps()).rev() {
            let emb = vec![self.embedding_step(t) as f64; b];
            let eps_hat = self.predict(&x, l_s, l_s, mask, &emb)?;
            let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
            let mean = ((&x - (eps_hat * coef)?)? / sched.alpha(t).sqrt())?;
            x = if t > 1 {
                let z = randn(&mut rng, l_s.dims(), l_s.dtype(), l_s.device())?;
                (mean + (z * sched.beta(t).sqrt())?)?
            } else {
                mean
            };
            let norm = x
                .to_dtype(DType::F64)?
                .sqr()?
                .sum_all()?
                .to_scalar::<f64>()?
                .sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite { step: t, norm });
            }
        }
        let x = if local {
            let sel = mask.ge(0.5)?.broadcast_as(l_s.dims())?;
            sel.where_cond(&x, l_s)?
        } else {
            x
        };
        Ok(x.clamp(0.0, 1.0)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn dev() -> Device {
        Device::Cpu
    }

    fn checker_mask(b: usize, h: usize, w: usize) -> Tensor {
        let v: Vec<f64> = (0..b * h * w)
            .map(|i| ((i % w + (i / w) % h) % 2) as f64)
            .collect();
        Tensor::from_vec(v, (b, 1, h, w), &dev()).unwrap()
    }

    #[test]
    fn presets() {
        let tr = ScheduleSpec::from_name(TRAIN_PRESET)
            .unwrap()
            .build()
            .unwrap();
        assert_eq!((tr.steps(), tr.beta(1), tr.beta(1000)), (1000, 1e-4, 0.02));
        let te = ScheduleSpec::from_name(TEST_PRESET)
            .unwrap()
            .build()
            .unwrap();
        assert_eq!((te.steps(), te.beta(1), te.beta(50)), (50, 1e-4, 0.5));
        assert!(ScheduleSpec::from_name("nope").is_err());
    }

    #[test]
    fn alpha_bar_direct_product() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - s.beta(1));
        for t in 1..=1000 {
            let beta = |k: usize| 1e-4 + (0.02 - 1e-4) * (k - 1) as f64 / 999.0;
            let direct: f64 = (1..=t).map(|k| 1.0 - beta(k)).product();
            assert!((s.alpha_bar(t) - direct).abs() < 1e-12);
            if t > 1 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
        assert!(s.alpha_bar(1000) < 1e-3);
    }

    #[test]
    fn schedule_bounds() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.1, 0.05).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
        let one = make_schedule(1, 0.3, 0.3).unwrap();
        assert_eq!(one.alpha_bar(1), 0.7);
    }

    #[test]
    fn forward_diffuse_cases() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let x0 = Tensor::new(&[[0.2f64, 0.9], [0.5, 0.1]], &dev())
            .unwrap()
            .reshape((2, 1, 2, 1))
            .unwrap();
        let zero = x0.zeros_like().unwrap();
        let xt = forward_diffuse(&x0, &[10, 700], &zero, &s).unwrap();
        let got: Vec<f64> = xt.flatten_all().unwrap().to_vec1().unwrap();
        let want = [
            0.2 * s.alpha_bar(10).sqrt(),
            0.9 * s.alpha_bar(10).sqrt(),
            0.5 * s.alpha_bar(700).sqrt(),
            0.1 * s.alpha_bar(700).sqrt(),
        ];
        assert_eq!(got, want);
        let tiny = make_schedule(10, 1e-12, 1e-12).unwrap();
        let eps = x0.ones_like().unwrap();
        let xt: Vec<f64> = forward_diffuse(&x0, &[1, 1], &eps, &tiny)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        for (a, b) in xt.iter().zip([0.2, 0.9, 0.5, 0.1]) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!(forward_diffuse(&x0, &[0, 1], &eps, &s).is_err());
        assert!(forward_diffuse(&x0, &[1001, 1], &eps, &s).is_err());
    }

    #[test]
    fn distinct_steps_distinct_outputs() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let x0 = Tensor::full(0.5f64, (1, 3, 2, 2), &dev()).unwrap();
        let eps = Tensor::full(0.3f64, (1, 3, 2, 2), &dev()).unwrap();
        let a: Vec<f64> = forward_diffuse(&x0, &[5], &eps, &s)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let b: Vec<f64> = forward_diffuse(&x0, &[6], &eps, &s)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn condition_identities() {
        let mut st = ParamStore::new(1, DType::F64);
        let xt = st.randn(&[2, 3, 4, 4]).unwrap();
        let x0 = st.randn(&[2, 3, 4, 4]).unwrap();
        let zeros = Tensor::zeros((2, 1, 4, 4), DType::F64, &dev()).unwrap();
        let ones = zeros.ones_like().unwrap();
        let flat = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(flat(&build_condition(&xt, &x0, &zeros).unwrap()), flat(&x0));
        assert_eq!(flat(&build_condition(&xt, &x0, &ones).unwrap()), flat(&xt));
        let m = checker_mask(2, 4, 4);
        let c = build_condition(&xt, &x0, &m).unwrap();
        let (cv, av, bv, mv) = (flat(&c), flat(&xt), flat(&x0), flat(&m));
        for i in 0..cv.len() {
            let p = (i / 48) * 16 + i % 16;
            assert_eq!(cv[i], if mv[p] == 1.0 { av[i] } else { bv[i] });
        }
        let twice = build_condition(&c, &x0, &m).unwrap();
        assert_eq!(flat(&twice), cv);
        let bad = Tensor::zeros((2, 1, 4, 5), DType::F64, &dev()).unwrap();
        assert!(build_condition(&xt, &x0, &bad).is_err());
    }

    #[test]
    fn denoise_loss_oracle_and_masking() {
        let mut st = ParamStore::new(2, DType::F64);
        let eps = st.randn(&[2, 3, 4, 4]).unwrap();
        let hat = candle_core::Var::from_tensor(&st.randn(&[2, 3, 4, 4]).unwrap()).unwrap();
        let m = checker_mask(2, 4, 4);
        let loss = denoise_loss(&eps, hat.as_tensor(), &m, DenoiseRange::Local).unwrap();
        assert!(!loss.empty_mask);
        let (e, h, mv): (Vec<f64>, Vec<f64>, Vec<f64>) = (
            eps.flatten_all().unwrap().to_vec1().unwrap(),
            hat.as_tensor().flatten_all().unwrap().to_vec1().unwrap(),
            m.flatten_all().unwrap().to_vec1().unwrap(),
        );
        let (mut sum, mut n) = (0.0, 0.0);
        for i in 0..e.len() {
            let p = (i / 48) * 16 + i % 16;
            if mv[p] == 1.0 {
                sum += (e[i] - h[i]).powi(2);
                n += 1.0;
            }
        }
        let got = loss.value.to_scalar::<f64>().unwrap();
        assert!((got - sum / n).abs() < 1e-12);

        let g: Vec<f64> = loss
            .value
            .backward()
            .unwrap()
            .get(hat.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        for i in 0..g.len() {
            let p = (i / 48) * 16 + i % 16;
            if mv[p] == 0.0 {
                assert_eq!(g[i], 0.0);
            }
        }
        assert_eq!(
            denoise_loss(&eps, &eps, &m, DenoiseRange::Local)
                .unwrap()
                .value
                .to_scalar::<f64>()
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn empty_mask_loss_is_flagged_zero() {
        let mut st = ParamStore::new(3, DType::F64);
        let eps = st.randn(&[1, 3, 4, 4]).unwrap();
        let hat = st.randn(&[1, 3, 4, 4]).unwrap();
        let m = Tensor::zeros((1, 1, 4, 4), DType::F64, &dev()).unwrap();
        let l = denoise_loss(&eps, &hat, &m, DenoiseRange::Local).unwrap();
        assert!(l.empty_mask);
        assert_eq!(l.value.to_scalar::<f64>().unwrap(), 0.0);
        let g = denoise_loss(&eps, &hat, &m, DenoiseRange::Global).unwrap();
        assert!(g.value.to_scalar::<f64>().unwrap() > 0.0);
    }

    fn small_cfg(variant: &str) -> LLCConfig {
        let mut cfg = LLCConfig::variant(variant).unwrap();
        cfg.unet = UNetConfig {
            base_channels: 8,
            channel_mults: vec![1, 2],
            groups: 4,
        };
        cfg.schedule_test = ScheduleSpec {
            steps: 5,
            ..ScheduleSpec::TEST
        };
        cfg
    }

    #[test]
    fn variants_are_wired() {
        assert_eq!(LLCConfig::default(), LLCConfig::variant("ours").unwrap());
        let a = LLCConfig::variant("a").unwrap();
        assert_eq!(
            (a.condition_mode, a.denoise_range),
            (ConditionMode::LsOnly, DenoiseRange::Global)
        );
        let d = LLCConfig::variant("d").unwrap();
        assert_eq!(
            (d.condition_mode, d.denoise_range),
            (ConditionMode::LsPlusMask, DenoiseRange::Local)
        );
        assert!(LLCConfig::variant("e").is_err());
        for mode in ConditionMode::ALL {
            assert_eq!(ConditionMode::from_name(mode.name()).unwrap(), mode);
        }
    }

    #[test]
    fn time_embedding_reaches_output() {
        let llc = LocalLightingCorrection::new(&small_cfg("ours"), 0, DType::F32).unwrap();
        let mut st = ParamStore::new(9, DType::F32);
        let x = st.randn(&[1, 3, 16, 16]).unwrap();
        let l = st.randn(&[1, 3, 16, 16]).unwrap();
        let m = checker_mask(1, 16, 16).to_dtype(DType::F32).unwrap();
        let a = llc.predict(&x, &l, &l, &m, &[1.0]).unwrap();
        let a2 = llc.predict(&x, &l, &l, &m, &[1.0]).unwrap();
        let b = llc.predict(&x, &l, &l, &m, &[1000.0]).unwrap();
        let diff = (&a - &b)
            .unwrap()
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(diff > 0.0);
        assert_eq!(
            (&a - &a2)
                .unwrap()
                .abs()
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn sampler_keeps_outside_and_is_seeded() {
        for variant in ["b", "d", "ours"] {
            let llc = LocalLightingCorrection::new(&small_cfg(variant), 0, DType::F32).unwrap();
            let mut st = ParamStore::new(4, DType::F32);
            let l = crate::nn::sigmoid(&st.randn(&[2, 3, 16, 16]).unwrap()).unwrap();
            let m = checker_mask(2, 16, 16).to_dtype(DType::F32).unwrap();
            let out = llc.sample(&l, &m, 11).unwrap();
            let again = llc.sample(&l, &m, 11).unwrap();
            let o: Vec<f32> = out.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(o, again.flatten_all().unwrap().to_vec1::<f32>().unwrap());
            let lv: Vec<f32> = l.flatten_all().unwrap().to_vec1().unwrap();
            let mv: Vec<f32> = m.flatten_all().unwrap().to_vec1().unwrap();
            for i in 0..o.len() {
                let p = (i / 768) * 256 + i % 256;
                if mv[p] == 0.0 {
                    assert_eq!(o[i].to_bits(), lv[i].to_bits());
                }
                assert!((0.0..=1.0).contains(&o[i]));
            }
            let zeros = m.zeros_like().unwrap();
            let same: Vec<f32> = llc
                .sample(&l, &zeros, 3)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1()
                .unwrap();
            assert_eq!(same, lv);
        }
    }

    #[test]
    fn nearest_step_mapping() {
        let llc = LocalLightingCorrection::new(&small_cfg("ours"), 0, DType::F32).unwrap();
        let tr = llc.train_schedule();
        assert_eq!(tr.nearest_step(tr.alpha_bar(37)), 37);
        assert_eq!(llc.embedding_step(1), 1);
        let steps: Vec<usize> = (1..=5).map(|t| llc.embedding_step(t)).collect();
        assert!(steps.windows(2).all(|w| w[0] <= w[1]));
    }
}
