use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use super::ParamStore;
use crate::error::{Error, Result};

/// Adam with moments kept by parameter name, so they can be checkpointed
/// and restored exactly.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update. Returns `false` and leaves parameters and moments
    /// untouched when any updated value would be non-finite.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<bool> {
        let t = self.step + 1;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let mut pending = Vec::new();
        for (name, var) in store.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let next = (var.as_tensor() - (update * lr)?)?;
            let sum = next
                .to_dtype(candle_core::DType::F64)?
                .sum_all()?
                .to_scalar::<f64>()?;
            if !sum.is_finite() {
                return Ok(false);
            }
            pending.push((name.clone(), var, next, m, v));
        }
        for (name, var, next, m, v) in pending {
            var.set(&next)?;
            self.moments.insert(name, (m, v));
        }
        self.step = t;
        Ok(true)
    }

    /// Moments as `(name, shape, data)`, first moments under `m.` and second
    /// under `v.`.
    pub fn export(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        let mut out = Vec::new();
        for (name, (m, v)) in &self.moments {
            for (tag, t) in [("m", m), ("v", v)] {
                let data = t
                    .to_dtype(candle_core::DType::F32)?
                    .flatten_all()?
                    .to_vec1()?;
                out.push((format!("{tag}.{name}"), t.dims().to_vec(), data));
            }
        }
        Ok(out)
    }

    pub fn import(
        &mut self,
        step: usize,
        tensors: &[(String, Vec<usize>, Vec<f32>)],
        store: &ParamStore,
    ) -> Result<()> {
        let mut firsts = BTreeMap::new();
        let mut seconds = BTreeMap::new();
        for (name, shape, data) in tensors {
            let t = Tensor::from_vec(data.clone(), shape.as_slice(), store.device())?
                .to_dtype(store.dtype())?;
            if let Some(p) = name.strip_prefix("m.") {
                firsts.insert(p.to_string(), t);
            } else if let Some(p) = name.strip_prefix("v.") {
                seconds.insert(p.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!(
                    "unexpected optimizer tensor {name}"
                )));
            }
        }
        self.moments.clear();
        for (name, m) in firsts {
            let v = seconds
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing second moment for {name}")))?;
            self.moments.insert(name, (m, v));
        }
        self.step = step;
        Ok(())
    }
}
