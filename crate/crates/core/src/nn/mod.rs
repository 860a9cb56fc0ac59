//! Small layer toolkit on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] that initializes them from its own
//! seeded RNG, so two stores built with the same seed and the same
//! construction order hold bit-identical weights.

mod adam;
pub mod fused;
pub mod im2col;
mod schedule;

pub use adam::Adam;
pub use schedule::WarmupCosine;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
}

pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Returns the parameter `name`, creating it with `init` if absent.
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::shape(shape, v.dims()));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(bound) => (0..n)
                .map(|_| self.rng.random_range(-bound..=bound))
                .collect(),
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter in place; layers holding it see the new value.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown parameter {name}")))?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Zeroes every parameter whose name contains `pattern`; returns how many.
    pub fn zero_matching(&self, pattern: &str) -> Result<usize> {
        let mut n = 0;
        for (name, var) in &self.vars {
            if name.contains(pattern) {
                var.set(&var.as_tensor().zeros_like()?)?;
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn export(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        self.vars
            .iter()
            .map(|(name, v)| {
                let data = v
                    .as_tensor()
                    .to_dtype(DType::F32)?
                    .flatten_all()?
                    .to_vec1()?;
                Ok((name.clone(), v.dims().to_vec(), data))
            })
            .collect()
    }

    /// Pre-populates parameters; a network built afterwards picks them up by
    /// name instead of drawing fresh values.
    pub fn import(&mut self, tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
        for (name, shape, data) in tensors {
            let t = Tensor::from_vec(data.clone(), shape.as_slice(), &self.device)?
                .to_dtype(self.dtype)?;
            match self.vars.get(name) {
                Some(v) => {
                    if v.dims() != shape.as_slice() {
                        return Err(Error::shape(shape, v.dims()));
                    }
                    v.set(&t)?;
                }
                None => {
                    self.vars.insert(name.clone(), Var::from_tensor(&t)?);
                }
            }
        }
        Ok(())
    }

    pub fn randn(&mut self, shape: &[usize]) -> Result<Tensor> {
        randn(&mut self.rng, shape, self.dtype, &self.device)
    }
}

/// Standard-normal tensor drawn from `rng`.
pub fn randn(rng: &mut impl Rng, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let init = Init::Uniform(fan_in_bound(cin * kernel * kernel));
        Self::with_init(store, name, [cin, cout, kernel], stride, padding, init)
    }

    /// Same layout as [`Conv2d::new`], with all-zero initial parameters.
    pub fn zeros(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Self::with_init(
            store,
            name,
            [cin, cout, kernel],
            stride,
            padding,
            Init::Zeros,
        )
    }

    fn with_init(
        store: &mut ParamStore,
        name: &str,
        [cin, cout, kernel]: [usize; 3],
        stride: usize,
        padding: usize,
        init: Init,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.get(
                &format!("{name}.weight"),
                &[cout, cin, kernel, kernel],
                init,
            )?,
            bias: store.get(&format!("{name}.bias"), &[cout], init)?,
            stride,
            padding,
        })
    }

    /// Copy whose parameters are cut from the autograd graph.
    pub fn frozen(&self) -> Self {
        Self {
            weight: self.weight.detach(),
            bias: self.bias.detach(),
            ..*self
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        fused::channel_shift(
            &im2col::conv2d(x, &self.weight, self.stride, self.padding)?,
            &self.bias,
        )
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = fan_in_bound(cout * kernel * kernel);
        Ok(Self {
            weight: store.get(
                &format!("{name}.weight"),
                &[cin, cout, kernel, kernel],
                Init::Uniform(bound),
            )?,
            bias: store.get(&format!("{name}.bias"), &[cout], Init::Uniform(bound))?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        fused::channel_shift(
            &im2col::conv_transpose2d(x, &self.weight, self.stride, self.padding)?,
            &self.bias,
        )
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Result<Self> {
        let bound = fan_in_bound(din);
        Ok(Self {
            weight: store.get(
                &format!("{name}.weight"),
                &[dout, din],
                Init::Uniform(bound),
            )?,
            bias: Some(store.get(&format!("{name}.bias"), &[dout], Init::Uniform(bound))?),
        })
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Result<Self> {
        let bound = fan_in_bound(din);
        Ok(Self {
            weight: store.get(
                &format!("{name}.weight"),
                &[dout, din],
                Init::Uniform(bound),
            )?,
            bias: None,
        })
    }

    /// `(dout, din)`.
    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    /// `x` is `(N, din)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Affine-free instance normalization over the spatial dims of `(B, C, H, W)`.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(fused::standardize(&x.reshape((b * c, h * w))?)?.reshape((b, c, h, w))?)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, groups: usize, channels: usize) -> Result<Self> {
        if channels % groups != 0 {
            return Err(Error::InvalidParameter(format!(
                "{channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            groups,
            gamma: store.get(&format!("{name}.gamma"), &[channels], Init::Ones)?,
            beta: store.get(&format!("{name}.beta"), &[channels], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let normed = fused::standardize(&x.reshape((b * self.groups, (c / self.groups) * h * w))?)?
            .reshape((b, c, h, w))?;
        fused::channel_affine(&normed, &self.gamma, &self.beta)
    }
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, 0.2)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// Squared L2 norm over all parameter gradients.
pub fn grad_norm(store: &ParamStore, grads: &candle_core::backprop::GradStore) -> Result<f64> {
    let mut total = 0.0;
    for (_, var) in store.vars() {
        if let Some(g) = grads.get(var.as_tensor()) {
            total += g
                .to_dtype(DType::F64)?
                .sqr()?
                .sum_all()?
                .to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}
