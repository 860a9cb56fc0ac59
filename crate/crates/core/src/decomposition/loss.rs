//! Self-supervised decomposition losses. `‖·‖₁` is the mean absolute value
//! over all elements, so every term is a per-element average and independent
//! of batch order.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompLossConfig {
    /// Weight of the reflectance term in the total.
    pub reflectance_weight: f64,
    /// Exponent scale on the reflectance gradient magnitude.
    pub smoothness_lambda: f64,
    /// Margin of the `R < L_sf` ordering hinge.
    pub hinge_eps: f64,
}

impl Default for DecompLossConfig {
    fn default() -> Self {
        Self {
            reflectance_weight: 0.1,
            smoothness_lambda: -20.0,
            hinge_eps: 1e-3,
        }
    }
}

fn same_shape(tensors: &[&Tensor]) -> Result<()> {
    let first = tensors[0].dims();
    for t in &tensors[1..] {
        if t.dims() != first {
            return Err(Error::shape(first, t.dims()));
        }
    }
    Ok(())
}

fn l1(x: &Tensor) -> Result<Tensor> {
    Ok(x.abs()?.mean_all()?)
}

fn recon_error(r: &Tensor, l: &Tensor, i: &Tensor) -> Result<Tensor> {
    l1(&((r * l)? - i)?)
}

/// `‖R_s∗L_s − I_s‖₁ + ‖R_sf∗L_sf − I_sf‖₁`
pub fn loss_fidelity(
    r_s: &Tensor,
    l_s: &Tensor,
    i_s: &Tensor,
    r_sf: &Tensor,
    l_sf: &Tensor,
    i_sf: &Tensor,
) -> Result<Tensor> {
    same_shape(&[r_s, l_s, i_s, r_sf, l_sf, i_sf])?;
    Ok((recon_error(r_s, l_s, i_s)? + recon_error(r_sf, l_sf, i_sf)?)?)
}

/// `‖R_s − R_sf‖₁ + ‖R_s∗L_sf − I_sf‖₁ + ‖R_sf∗L_s − I_s‖₁`
pub fn loss_illumination(
    r_s: &Tensor,
    r_sf: &Tensor,
    l_s: &Tensor,
    l_sf: &Tensor,
    i_s: &Tensor,
    i_sf: &Tensor,
) -> Result<Tensor> {
    same_shape(&[r_s, r_sf, l_s, l_sf, i_s, i_sf])?;
    let consistency = l1(&(r_s - r_sf)?)?;
    let cross = (recon_error(r_s, l_sf, i_sf)? + recon_error(r_sf, l_s, i_s)?)?;
    Ok((consistency + cross)?)
}

/// Forward differences along width and height of a `(B, C, H, W)` tensor
/// with replicate boundary: the last column (row) difference is zero.
pub fn forward_differences(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, _, h, w) = x.dims4()?;
    let dx = if w > 1 {
        let d = (x.narrow(D::Minus1, 1, w - 1)? - x.narrow(D::Minus1, 0, w - 1)?)?;
        Tensor::cat(&[&d, &x.narrow(D::Minus1, 0, 1)?.zeros_like()?], D::Minus1)?
    } else {
        x.zeros_like()?
    };
    let dy = if h > 1 {
        let d = (x.narrow(D::Minus2, 1, h - 1)? - x.narrow(D::Minus2, 0, h - 1)?)?;
        Tensor::cat(&[&d, &x.narrow(D::Minus2, 0, 1)?.zeros_like()?], D::Minus2)?
    } else {
        x.zeros_like()?
    };
    Ok((dx, dy))
}

/// `Σ_{i∈{s,sf}} ‖ |∇L_sf| ∗ exp(λ |∇R_i|) ‖₁`, summed over both directions.
/// Gradients enter as magnitudes; a signed exponent with λ < 0 would blow up
/// on every falling edge.
pub fn reflectance_smoothness(
    r_s: &Tensor,
    r_sf: &Tensor,
    l_sf: &Tensor,
    lambda: f64,
) -> Result<Tensor> {
    same_shape(&[r_s, r_sf, l_sf])?;
    let (lx, ly) = forward_differences(l_sf)?;
    let (lx, ly) = (lx.abs()?, ly.abs()?);
    let mut total = Tensor::zeros((), r_s.dtype(), r_s.device())?;
    for r in [r_s, r_sf] {
        let (rx, ry) = forward_differences(r)?;
        let tx = (&lx * (rx.abs()? * lambda)?.exp()?)?.mean_all()?;
        let ty = (&ly * (ry.abs()? * lambda)?.exp()?)?.mean_all()?;
        total = ((total + tx)? + ty)?;
    }
    Ok(total)
}

/// Soft form of `R_i < L_sf`: `Σ_i mean(max(0, R_i − L_sf + ε))`.
pub fn ordering_hinge(r_s: &Tensor, r_sf: &Tensor, l_sf: &Tensor, eps: f64) -> Result<Tensor> {
    same_shape(&[r_s, r_sf, l_sf])?;
    let a = ((r_s - l_sf)? + eps)?.relu()?.mean_all()?;
    let b = ((r_sf - l_sf)? + eps)?.relu()?.mean_all()?;
    Ok((a + b)?)
}

/// Reflectance regularizer: gradient-aware smoothness plus the ordering hinge.
/// `L_s` is deliberately absent.
pub fn loss_reflectance(
    r_s: &Tensor,
    r_sf: &Tensor,
    l_sf: &Tensor,
    cfg: &DecompLossConfig,
) -> Result<Tensor> {
    let smooth = reflectance_smoothness(r_s, r_sf, l_sf, cfg.smoothness_lambda)?;
    let hinge = ordering_hinge(r_s, r_sf, l_sf, cfg.hinge_eps)?;
    Ok((smooth + hinge)?)
}

pub fn loss_decomposition_total(
    fidelity: &Tensor,
    illumination: &Tensor,
    reflectance: &Tensor,
    reflectance_weight: f64,
) -> Result<Tensor> {
    Ok(((fidelity + illumination)? + (reflectance * reflectance_weight)?)?)
}

#[derive(Debug, Clone)]
pub struct DecompLosses {
    pub fidelity: Tensor,
    pub illumination: Tensor,
    pub reflectance: Tensor,
    pub total: Tensor,
}

impl DecompLosses {
    #[allow(clippy::too_many_arguments)]
    pub fn compute(
        r_s: &Tensor,
        l_s: &Tensor,
        i_s: &Tensor,
        r_sf: &Tensor,
        l_sf: &Tensor,
        i_sf: &Tensor,
        cfg: &DecompLossConfig,
    ) -> Result<Self> {
        let fidelity = loss_fidelity(r_s, l_s, i_s, r_sf, l_sf, i_sf)?;
        let illumination = loss_illumination(r_s, r_sf, l_s, l_sf, i_s, i_sf)?;
        let reflectance = loss_reflectance(r_s, r_sf, l_sf, cfg)?;
        let total = loss_decomposition_total(
            &fidelity,
            &illumination,
            &reflectance,
            cfg.reflectance_weight,
        )?;
        Ok(Self {
            fidelity,
            illumination,
            reflectance,
            total,
        })
    }
}
