//! Run configuration, presets and the flat `key = value` config format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decomposition::loss::DecompLossConfig;
use crate::decomposition::{DecompNetConfig, SIZE_DIVISOR};
use crate::error::{Error, Result};
use crate::igtr::IgtrVariant;
use crate::llc::unet::UNetConfig;
use crate::llc::{ConditionMode, DenoiseRange, LLCConfig, ScheduleSpec};
use crate::nn::WarmupCosine;
use crate::restoration::{BilateralNetConfig, Fusion};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}, expected desk or paper"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub iters_decomp: usize,
    pub iters_diffusion: usize,
    pub iters_restore: usize,
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Side length every sample is cropped and resized to.
    pub resolution: usize,
    /// Steps between intermediate checkpoint writes; 0 writes only at the end.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            learning_rate: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            batch_size: 4,
            iters_decomp: 2000,
            iters_diffusion: 2000,
            iters_restore: 2000,
            warmup_fraction: 0.05,
            seed: 0,
            resolution: 64,
            checkpoint_every: 500,
        }
    }

    pub fn paper() -> Self {
        Self {
            batch_size: 12,
            iters_decomp: 100_000,
            iters_diffusion: 200_000,
            iters_restore: 200_000,
            resolution: 256,
            checkpoint_every: 5000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
            ("warmup_fraction", self.warmup_fraction),
        ];
        for (key, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{key} must be positive, got {v}")));
            }
        }
        if self.adam_beta1 >= 1.0 || self.adam_beta2 >= 1.0 || self.warmup_fraction >= 1.0 {
            return Err(Error::Config(
                "betas and warmup_fraction must be below 1".into(),
            ));
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("iters_decomp", self.iters_decomp),
            ("iters_diffusion", self.iters_diffusion),
            ("iters_restore", self.iters_restore),
            ("resolution", self.resolution),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        if self.resolution % SIZE_DIVISOR != 0 {
            return Err(Error::Config(format!(
                "resolution must be a multiple of {SIZE_DIVISOR}, got {}",
                self.resolution
            )));
        }
        for total in [self.iters_decomp, self.iters_diffusion, self.iters_restore] {
            self.lr_schedule(total)?;
        }
        Ok(())
    }

    pub fn lr_schedule(&self, total: usize) -> Result<WarmupCosine> {
        WarmupCosine::with_warmup_fraction(self.learning_rate, total, self.warmup_fraction)
    }
}

/// Everything needed to rebuild every network of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub preset: Preset,
    pub train: TrainConfig,
    pub decomp: DecompNetConfig,
    pub decomp_loss: DecompLossConfig,
    pub llc: LLCConfig,
    pub restore: BilateralNetConfig,
}

impl PipelineConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self {
                preset,
                train: TrainConfig::desk(),
                decomp: DecompNetConfig::default(),
                decomp_loss: DecompLossConfig::default(),
                llc: LLCConfig::default(),
                restore: BilateralNetConfig::default(),
            },
            Preset::Paper => Self {
                preset,
                train: TrainConfig::paper(),
                decomp: DecompNetConfig {
                    base_channels: 32,
                    ..DecompNetConfig::default()
                },
                decomp_loss: DecompLossConfig::default(),
                llc: LLCConfig {
                    unet: UNetConfig::paper(),
                    ..LLCConfig::default()
                },
                restore: BilateralNetConfig {
                    base_channels: 32,
                    ..BilateralNetConfig::default()
                },
            },
        }
    }

    pub fn desk() -> Self {
        Self::preset(Preset::Desk)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.decomp.validate()?;
        self.llc.unet.validate()?;
        self.llc.schedule_train.build()?;
        self.llc.schedule_test.build()?;
        self.restore.validate()?;
        if self.train.resolution % self.llc.unet.size_divisor() != 0 {
            return Err(Error::Config(
                "resolution not divisible by the UNet depth".into(),
            ));
        }
        Ok(())
    }

    /// Applies an ablation name: a diffusion row (`a`–`d`, `ours`) or a
    /// fusion column (`multiply`, `cat-i`, `cat-f`, `sa`, `igtr-g`, `igtr-l`,
    /// `full`). `full` resets both.
    pub fn apply_variant(&mut self, name: &str) -> Result<()> {
        let is_llc = LLCConfig::VARIANTS.contains(&name) || name == "full";
        let is_restore = BilateralNetConfig::VARIANTS.contains(&name);
        if !is_llc && !is_restore {
            return Err(Error::Config(format!(
                "unknown variant {name:?}; expected one of {:?} or {:?}",
                LLCConfig::VARIANTS,
                BilateralNetConfig::VARIANTS
            )));
        }
        if is_llc {
            let v = LLCConfig::variant(name)?;
            self.llc.condition_mode = v.condition_mode;
            self.llc.denoise_range = v.denoise_range;
        }
        if is_restore {
            let v = BilateralNetConfig::variant(name)?;
            self.restore.igtr.variant = v.igtr.variant;
            self.restore.fusion = v.fusion;
        }
        Ok(())
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "adam_beta1" => t.adam_beta1 = parse(key, value)?,
            "adam_beta2" => t.adam_beta2 = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "iters_decomp" => t.iters_decomp = parse(key, value)?,
            "iters_diffusion" => t.iters_diffusion = parse(key, value)?,
            "iters_restore" => t.iters_restore = parse(key, value)?,
            "warmup_fraction" => t.warmup_fraction = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "resolution" => t.resolution = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "decomp_base_channels" => self.decomp.base_channels = parse(key, value)?,
            "skip_connections" => self.decomp.skip_connections = parse(key, value)?,
            "reflectance_weight" => self.decomp_loss.reflectance_weight = parse(key, value)?,
            "smoothness_lambda" => self.decomp_loss.smoothness_lambda = parse(key, value)?,
            "hinge_eps" => self.decomp_loss.hinge_eps = parse(key, value)?,
            "condition_mode" => self.llc.condition_mode = ConditionMode::from_name(value)?,
            "denoise_range" => self.llc.denoise_range = DenoiseRange::from_name(value)?,
            "schedule_train" => self.llc.schedule_train = parse_schedule(value)?,
            "schedule_test" => self.llc.schedule_test = parse_schedule(value)?,
            "unet_base_channels" => self.llc.unet.base_channels = parse(key, value)?,
            "unet_channel_mults" => self.llc.unet.channel_mults = parse_list(key, value)?,
            "unet_groups" => self.llc.unet.groups = parse(key, value)?,
            "restore_base_channels" => self.restore.base_channels = parse(key, value)?,
            "region_sizes" => self.restore.igtr.region_sizes = parse_list(key, value)?,
            "variant" => {
                if value == "multiply" {
                    self.restore.fusion = Fusion::Multiply;
                } else {
                    let v = IgtrVariant::from_name(value)?;
                    self.restore.igtr.variant = v;
                    self.restore.fusion = match v {
                        IgtrVariant::ConcatInput => Fusion::CatI,
                        IgtrVariant::ConcatFeature => Fusion::CatF,
                        _ => Fusion::Igtr,
                    };
                }
            }
            "fusion" => {
                self.restore.fusion =
                    serde_json::from_value(serde_json::Value::String(value.into()))
                        .map_err(|_| Error::Config(format!("unknown fusion {value:?}")))?
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`. Blank lines and `#`
    /// comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is plain data")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        serde_json::from_value(v.clone())
            .map_err(|e| Error::Checkpoint(format!("bad config echo: {e}")))
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

/// A preset name or `steps,beta_start,beta_end`.
fn parse_schedule(value: &str) -> Result<ScheduleSpec> {
    if let Ok(spec) = ScheduleSpec::from_name(value) {
        return Ok(spec);
    }
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("bad schedule {value:?}")));
    }
    let spec = ScheduleSpec {
        steps: parse("steps", parts[0])?,
        beta_start: parse("beta_start", parts[1])?,
        beta_end: parse("beta_end", parts[2])?,
    };
    spec.build()?;
    Ok(spec)
}
