use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup to `peak`, then cosine decay to zero at `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupCosine {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl WarmupCosine {
    pub fn new(peak: f64, warmup: usize, total: usize) -> Result<Self> {
        if !(peak > 0.0) || warmup == 0 || warmup >= total {
            return Err(Error::InvalidParameter(format!(
                "bad schedule: peak {peak}, warmup {warmup}, total {total}"
            )));
        }
        Ok(Self {
            peak,
            warmup,
            total,
        })
    }

    /// Warmup covering `fraction` of the run, at least one step.
    pub fn with_warmup_fraction(peak: f64, total: usize, fraction: f64) -> Result<Self> {
        let warmup = ((total as f64 * fraction).round() as usize).max(1);
        Self::new(peak, warmup, total)
    }

    /// Learning rate for the zero-based `step`. The warmup ends at
    /// `step = warmup - 1` with `peak`, which is also where the cosine starts.
    pub fn lr(&self, step: usize) -> f64 {
        let s = step as f64 + 1.0;
        let w = self.warmup as f64;
        if s <= w {
            self.peak * s / w
        } else {
            let progress = ((s - w) / (self.total as f64 + 1.0 - w)).min(1.0);
            0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}
