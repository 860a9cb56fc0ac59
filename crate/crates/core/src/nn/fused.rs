//! Fused kernels for the hottest composite ops: per-row standardization,
//! per-channel scale and shift, and 2× nearest upsampling.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor};

use crate::error::Result;

pub const NORM_EPS: f64 = 1e-5;

fn slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("fused ops need contiguous input"),
    }
}

trait Float: Copy + Default + Into<f64> {
    fn of(v: f64) -> Self;
}

impl Float for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
}

impl Float for f64 {
    fn of(v: f64) -> Self {
        v
    }
}

/// Mean and `1/sqrt(var + eps)` of one row, accumulated in f64.
fn moments<T: Float>(row: &[T]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| v.into()).sum::<f64>() / n;
    let var = row.iter().map(|&v| (v.into() - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + NORM_EPS).sqrt())
}

fn standardize_rows<T: Float>(x: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::default(); x.len()];
    for (src, dst) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let (mean, inv) = moments(src);
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = T::of((v.into() - mean) * inv);
        }
    }
    out
}

/// `dx = inv·(g − mean(g) − y·mean(g·y))` per row.
fn standardize_grad<T: Float>(x: &[T], g: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::default(); x.len()];
    let n = d as f64;
    for ((src, grad), dst) in x
        .chunks_exact(d)
        .zip(g.chunks_exact(d))
        .zip(out.chunks_exact_mut(d))
    {
        let (mean, inv) = moments(src);
        let y = |v: T| (v.into() - mean) * inv;
        let g_mean = grad.iter().map(|&v| v.into()).sum::<f64>() / n;
        let gy_mean = grad
            .iter()
            .zip(src)
            .map(|(&gv, &xv)| gv.into() * y(xv))
            .sum::<f64>()
            / n;
        for ((o, &gv), &xv) in dst.iter_mut().zip(grad).zip(src) {
            *o = T::of(inv * (gv.into() - g_mean - y(xv) * gy_mean));
        }
    }
    out
}

struct Standardize;
struct StandardizeGrad;

impl CustomOp1 for Standardize {
    fn name(&self) -> &'static str {
        "standardize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = l.shape().dims2()?.1;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(standardize_rows(slice(v, l)?, d)),
            CpuStorage::F64(v) => CpuStorage::F64(standardize_rows(slice(v, l)?, d)),
            _ => candle_core::bail!("standardize: unsupported dtype"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(
            arg.apply_op2_no_bwd(&grad.contiguous()?, &StandardizeGrad)?,
        ))
    }
}

impl CustomOp2 for StandardizeGrad {
    fn name(&self) -> &'static str {
        "standardize-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = l1.shape().dims2()?.1;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                CpuStorage::F32(standardize_grad(slice(x, l1)?, slice(g, l2)?, d))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(standardize_grad(slice(x, l1)?, slice(g, l2)?, d))
            }
            _ => candle_core::bail!("standardize-grad: unsupported dtype"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Zero mean, unit variance (plus [`NORM_EPS`]) along the last dim of a
/// `(N, D)` tensor.
pub fn standardize(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Standardize)?)
}

fn upsample<T: Copy + Default>(x: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::default(); x.len() * 4];
    for (plane, dst) in x.chunks_exact(h * w).zip(out.chunks_exact_mut(4 * h * w)) {
        for y in 0..h {
            let src = &plane[y * w..(y + 1) * w];
            let row = &mut dst[2 * y * 2 * w..(2 * y + 1) * 2 * w];
            for (pair, &v) in row.chunks_exact_mut(2).zip(src) {
                pair[0] = v;
                pair[1] = v;
            }
            dst.copy_within(2 * y * 2 * w..(2 * y + 1) * 2 * w, (2 * y + 1) * 2 * w);
        }
    }
    out
}

fn sum_pool<T: Float>(g: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::default(); g.len() / 4];
    for (src, dst) in g.chunks_exact(4 * h * w).zip(out.chunks_exact_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                let at = |yy: usize, xx: usize| -> f64 { src[yy * 2 * w + xx].into() };
                dst[y * w + x] = T::of(
                    at(2 * y, 2 * x)
                        + at(2 * y, 2 * x + 1)
                        + at(2 * y + 1, 2 * x)
                        + at(2 * y + 1, 2 * x + 1),
                );
            }
        }
    }
    out
}

struct Upsample2;
struct SumPool2;

impl CustomOp1 for Upsample2 {
    fn name(&self) -> &'static str {
        "upsample2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(upsample(slice(v, l)?, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(upsample(slice(v, l)?, h, w)),
            _ => candle_core::bail!("upsample2: unsupported dtype"),
        };
        Ok((out, Shape::from((b, c, 2 * h, 2 * w))))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&SumPool2)?))
    }
}

impl CustomOp1 for SumPool2 {
    fn name(&self) -> &'static str {
        "sum-pool2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h2, w2) = l.shape().dims4()?;
        let (h, w) = (h2 / 2, w2 / 2);
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(sum_pool(slice(v, l)?, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(sum_pool(slice(v, l)?, h, w)),
            _ => candle_core::bail!("sum-pool2: unsupported dtype"),
        };
        Ok((out, Shape::from((b, c, h, w))))
    }
}

/// Nearest-neighbour 2× upsampling of `(B, C, H, W)`.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Upsample2)?)
}

/// `(B, C, S)` view of a `(B, C, ...)` layout.
fn bcs(l: &Layout) -> candle_core::Result<(usize, usize, usize)> {
    let dims = l.shape().dims();
    if dims.len() < 2 {
        candle_core::bail!("channel ops need at least (B, C), got {:?}", dims);
    }
    Ok((dims[0], dims[1], dims[2..].iter().product()))
}

/// Scale and shift hold one value per channel or one per `(b, c)` plane;
/// plane `k` of the flattened `(B·C, S)` view uses entry `k mod len`.
fn affine<T: Float>(x: &[T], scale: Option<&[T]>, shift: &[T], s: usize) -> Vec<T> {
    let mut out = vec![T::default(); x.len()];
    for (k, (src, dst)) in x.chunks_exact(s).zip(out.chunks_exact_mut(s)).enumerate() {
        let a = scale.map_or(1.0, |v| v[k % v.len()].into());
        let b: f64 = shift[k % shift.len()].into();
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = T::of(v.into() * a + b);
        }
    }
    out
}

fn channel_sums<T: Float>(x: &[T], m: usize, s: usize) -> Vec<T> {
    let mut acc = vec![0.0f64; m];
    for (k, src) in x.chunks_exact(s).enumerate() {
        acc[k % m] += src.iter().map(|&v| v.into()).sum::<f64>();
    }
    acc.into_iter().map(T::of).collect()
}

/// Plane sums folded modulo the wrapped length.
struct ChannelSum(usize);
struct ChannelShift;
struct ChannelAffine;

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, st: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, _, s) = bcs(l)?;
        let m = self.0;
        let out = match st {
            CpuStorage::F32(v) => CpuStorage::F32(channel_sums(slice(v, l)?, m, s)),
            CpuStorage::F64(v) => CpuStorage::F64(channel_sums(slice(v, l)?, m, s)),
            _ => candle_core::bail!("channel-sum: unsupported dtype"),
        };
        Ok((out, Shape::from(m)))
    }
}

/// Gradient of a broadcast `like` parameter: plane sums of `x`, shaped as
/// `like`.
fn channel_sum(x: &Tensor, like: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?
        .apply_op1_no_bwd(&ChannelSum(like.elem_count()))?
        .reshape(like.shape())
}

fn check_params(l: &Layout, params: &[&Layout]) -> candle_core::Result<usize> {
    let (b, c, s) = bcs(l)?;
    for p in params {
        let n = p.shape().elem_count();
        if n != c && n != b * c {
            candle_core::bail!("channel params of {n} elements do not fit {:?}", l.shape());
        }
    }
    Ok(s)
}

impl CustomOp2 for ChannelShift {
    fn name(&self) -> &'static str {
        "channel-shift"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let s = check_params(l1, &[l2])?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(b)) => {
                CpuStorage::F32(affine(slice(x, l1)?, None, slice(b, l2)?, s))
            }
            (CpuStorage::F64(x), CpuStorage::F64(b)) => {
                CpuStorage::F64(affine(slice(x, l1)?, None, slice(b, l2)?, s))
            }
            _ => candle_core::bail!("channel-shift: unsupported dtype"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        _x: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        Ok((Some(grad.clone()), Some(channel_sum(grad, b)?)))
    }
}

impl CustomOp3 for ChannelAffine {
    fn name(&self) -> &'static str {
        "channel-affine"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let s = check_params(l1, &[l2, l3])?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(a), CpuStorage::F32(b)) => {
                CpuStorage::F32(affine(slice(x, l1)?, Some(slice(a, l2)?), slice(b, l3)?, s))
            }
            (CpuStorage::F64(x), CpuStorage::F64(a), CpuStorage::F64(b)) => {
                CpuStorage::F64(affine(slice(x, l1)?, Some(slice(a, l2)?), slice(b, l3)?, s))
            }
            _ => candle_core::bail!("channel-affine: unsupported dtype"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        scale: &Tensor,
        shift: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let zeros = scale.zeros_like()?.detach();
        let dx = grad
            .contiguous()?
            .apply_op3_no_bwd(&scale.detach(), &zeros, &ChannelAffine)?;
        Ok((
            Some(dx),
            Some(channel_sum(&(grad * x)?, scale)?),
            Some(channel_sum(grad, shift)?),
        ))
    }
}

/// Adds `shift[c]` (shape `(C)`) or `shift[b, c]` (shape `(B, C)`) to every
/// plane of a `(B, C, ...)` tensor.
pub fn channel_shift(x: &Tensor, shift: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?
        .apply_op2(&shift.contiguous()?, ChannelShift)?)
}

/// `x·scale[c] + shift[c]` per channel of a `(B, C, ...)` tensor.
pub fn channel_affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?
        .apply_op3(&scale.contiguous()?, &shift.contiguous()?, ChannelAffine)?)
}
