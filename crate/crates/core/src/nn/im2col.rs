//! Patch extraction and its adjoint as differentiable ops, so convolutions
//! reduce to one matrix product in both directions.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::{Error, Result};

/// Sliding-window geometry over a `(C, H, W)` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let span = |n: usize| {
            (n + 2 * padding)
                .checked_sub(kernel)
                .map(|d| d / stride + 1)
        };
        match (span(height), span(width)) {
            (Some(out_h), Some(out_w)) if stride > 0 && kernel > 0 => Ok(Self {
                channels,
                height,
                width,
                kernel,
                stride,
                padding,
                out_h,
                out_w,
            }),
            _ => Err(Error::InvalidParameter(format!(
                "kernel {kernel} stride {stride} padding {padding} do not fit {height}x{width}"
            ))),
        }
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Visits every in-image tap as a run of output columns: `f(p, oy, ox0,
    /// iy, ix0, len)` covers output positions `ox0..ox0+len` of row `oy` of
    /// patch entry `p`, reading pixels `ix0, ix0+stride, ...` of input row
    /// `iy` in channel `p / (k·k)`.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let k = self.kernel;
        let (s, pad) = (self.stride, self.padding);
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let p = (c * k + ky) * k + kx;
                    // first ox with ox*s + kx >= pad, and one past the last
                    // with ox*s + kx < width + pad
                    let lo = pad.saturating_sub(kx).div_ceil(s);
                    let hi = ((self.width + pad).saturating_sub(kx))
                        .div_ceil(s)
                        .min(self.out_w);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.out_h {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        f(p, oy, lo, iy as usize, lo * s + kx - pad, hi - lo);
                    }
                }
            }
        }
    }

    /// `(B, C, H, W)` to the patch-major `(C·k·k, B·positions)` matrix.
    fn gather<T: Copy + Default>(&self, src: &[T], batch: usize) -> Vec<T> {
        let (plane, n) = (self.height * self.width, self.positions());
        let img = self.channels * plane;
        let width = batch * n;
        let mut out = vec![T::default(); self.patch_len() * width];
        let stride = self.stride;
        let k2 = self.kernel * self.kernel;
        self.for_each_run(|p, oy, ox0, iy, ix0, len| {
            let c = p / k2;
            for b in 0..batch {
                let s = &src[b * img + c * plane + iy * self.width..];
                let d = &mut out[p * width + b * n + oy * self.out_w + ox0..][..len];
                if stride == 1 {
                    d.copy_from_slice(&s[ix0..ix0 + len]);
                } else {
                    for (j, v) in d.iter_mut().enumerate() {
                        *v = s[ix0 + j * stride];
                    }
                }
            }
        });
        out
    }

    /// Adjoint of `gather`.
    fn scatter<T: Copy + Default + std::ops::AddAssign>(&self, src: &[T], batch: usize) -> Vec<T> {
        let (plane, n) = (self.height * self.width, self.positions());
        let img = self.channels * plane;
        let width = batch * n;
        let mut out = vec![T::default(); batch * img];
        let stride = self.stride;
        let k2 = self.kernel * self.kernel;
        self.for_each_run(|p, oy, ox0, iy, ix0, len| {
            let c = p / k2;
            for b in 0..batch {
                let s = &src[p * width + b * n + oy * self.out_w + ox0..][..len];
                let d = &mut out[b * img + c * plane + iy * self.width..];
                for (j, v) in s.iter().enumerate() {
                    d[ix0 + j * stride] += *v;
                }
            }
        });
        out
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("patch ops need contiguous input"),
    }
}

struct Im2Col(Geometry);
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let (b, c, h, w) = layout.shape().dims4()?;
        if (c, h, w) != (g.channels, g.height, g.width) {
            candle_core::bail!(
                "im2col: input {:?} does not match geometry {g:?}",
                layout.shape()
            );
        }
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.gather(contiguous(v, layout)?, b)),
            CpuStorage::F64(v) => CpuStorage::F64(g.gather(contiguous(v, layout)?, b)),
            _ => candle_core::bail!("im2col: unsupported dtype"),
        };
        Ok((out, Shape::from((g.patch_len(), b * g.positions()))))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let (p, width) = layout.shape().dims2()?;
        if p != g.patch_len() || width % g.positions() != 0 {
            candle_core::bail!(
                "col2im: input {:?} does not match geometry {g:?}",
                layout.shape()
            );
        }
        let b = width / g.positions();
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.scatter(contiguous(v, layout)?, b)),
            CpuStorage::F64(v) => CpuStorage::F64(g.scatter(contiguous(v, layout)?, b)),
            _ => candle_core::bail!("col2im: unsupported dtype"),
        };
        Ok((out, Shape::from((b, g.channels, g.height, g.width))))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// `(B, C, H, W)` to the patch-major `(C·k·k, B·out_h·out_w)` matrix;
/// out-of-image taps are zero.
pub fn im2col(x: &Tensor, g: Geometry) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Im2Col(g))?)
}

/// Adjoint of [`im2col`]: sums every patch entry back onto its pixel.
pub fn col2im(cols: &Tensor, g: Geometry) -> Result<Tensor> {
    Ok(cols.contiguous()?.apply_op1(Col2Im(g))?)
}

/// Cross-correlation with weight `(Cout, Cin, k, k)`, no bias.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (b, cin, h, w) = x.dims4()?;
    let (cout, wcin, k, k2) = weight.dims4()?;
    if wcin != cin || k != k2 {
        return Err(Error::shape((cout, cin, k, k), weight.dims()));
    }
    let g = Geometry::new(cin, h, w, k, stride, padding)?;
    let y = weight
        .reshape((cout, g.patch_len()))?
        .matmul(&im2col(x, g)?)?;
    Ok(y.reshape((cout, b, g.out_h, g.out_w))?.transpose(0, 1)?)
}

/// Transposed convolution with weight `(Cin, Cout, k, k)`, no bias or
/// output padding.
pub fn conv_transpose2d(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (b, cin, h, w) = x.dims4()?;
    let (wcin, cout, k, k2) = weight.dims4()?;
    if wcin != cin || k != k2 {
        return Err(Error::shape((cin, cout, k, k), weight.dims()));
    }
    let out = |n: usize| ((n - 1) * stride + k).checked_sub(2 * padding);
    let (Some(oh), Some(ow)) = (out(h), out(w)) else {
        return Err(Error::InvalidParameter(
            "transposed conv output would be empty".into(),
        ));
    };
    let g = Geometry::new(cout, oh, ow, k, stride, padding)?;
    debug_assert_eq!((g.out_h, g.out_w), (h, w));
    let xm = x.transpose(0, 1)?.reshape((cin, b * h * w))?;
    let cols = weight.reshape((cin, g.patch_len()))?.t()?.matmul(&xm)?;
    col2im(&cols, g)
}
