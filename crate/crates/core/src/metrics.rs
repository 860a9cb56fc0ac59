//! Evaluation metrics. Every image metric first resizes prediction, target
//! and mask to [`EVAL_RESOLUTION`] square (bilinear, mask re-binarized).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::color::rgb_to_lab;
use crate::error::{Error, Result};
use crate::image::{Image, Mask, CHANNELS};

pub const EVAL_RESOLUTION: usize = 256;
/// Reported PSNR for identical inputs, and the ceiling for everything else.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    /// Inside the shadow mask.
    #[serde(rename = "S")]
    Shadow,
    /// Outside the shadow mask.
    #[serde(rename = "NS")]
    NonShadow,
    #[serde(rename = "All")]
    All,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Shadow, Region::NonShadow, Region::All];

    pub fn tag(self) -> &'static str {
        match self {
            Region::Shadow => "S",
            Region::NonShadow => "NS",
            Region::All => "All",
        }
    }

    fn contains(self, in_mask: bool) -> bool {
        match self {
            Region::Shadow => in_mask,
            Region::NonShadow => !in_mask,
            Region::All => true,
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct Sum {
    total: f64,
    carry: f64,
}

impl Sum {
    fn add(&mut self, v: f64) {
        let t = self.total + v;
        if self.total.abs() >= v.abs() {
            self.carry += (self.total - t) + v;
        } else {
            self.carry += (v - t) + self.total;
        }
        self.total = t;
    }

    fn value(self) -> f64 {
        self.total + self.carry
    }
}

/// Inputs brought to the evaluation resolution.
struct Prepared {
    pred: Image,
    gt: Image,
    mask: Mask,
}

impl Prepared {
    fn new(pred: &Image, gt: &Image, mask: &Mask) -> Result<Self> {
        if pred.dims() != gt.dims() {
            return Err(Error::shape(gt.dims(), pred.dims()));
        }
        if mask.dims() != gt.dims() {
            return Err(Error::shape(gt.dims(), mask.dims()));
        }
        let n = EVAL_RESOLUTION;
        Ok(Self {
            pred: pred.resize(n, n)?,
            gt: gt.resize(n, n)?,
            mask: mask.resize(n, n)?,
        })
    }

    fn selection(&self, region: Region) -> Result<Vec<bool>> {
        let sel: Vec<bool> = self
            .mask
            .data()
            .iter()
            .map(|&m| region.contains(m == 1))
            .collect();
        if !sel.iter().any(|&s| s) {
            return Err(Error::EmptyRegion(region));
        }
        Ok(sel)
    }

    fn rmse_lab(&self, region: Region) -> Result<f64> {
        let sel = self.selection(region)?;
        let a = rgb_to_lab(&self.pred);
        let b = rgb_to_lab(&self.gt);
        let n = sel.len();
        let mut sum = Sum::default();
        let mut count = 0usize;
        for (p, _) in sel.iter().enumerate().filter(|(_, s)| **s) {
            sum.add(
                (0..CHANNELS)
                    .map(|c| (a.data[c * n + p] - b.data[c * n + p]).powi(2))
                    .sum::<f64>(),
            );
            count += 1;
        }
        Ok((sum.value() / count as f64).sqrt())
    }

    fn sse(&self, region: Region) -> Result<(f64, usize)> {
        let sel = self.selection(region)?;
        let mut sum = Sum::default();
        let mut count = 0;
        for c in 0..CHANNELS {
            let (a, b) = (self.pred.plane(c), self.gt.plane(c));
            for p in (0..sel.len()).filter(|&p| sel[p]) {
                sum.add((a[p] - b[p]).powi(2));
                count += 1;
            }
        }
        Ok((sum.value(), count))
    }

    fn mse(&self, region: Region) -> Result<f64> {
        let (sum, count) = self.sse(region)?;
        Ok(sum / count as f64)
    }

    fn psnr(&self, region: Region) -> Result<f64> {
        Ok(psnr_from_mse(self.mse(region)?))
    }

    fn ssim(&self, region: Region) -> Result<f64> {
        let sel = self.selection(region)?;
        let (h, w) = self.gt.dims();
        let mut total = Sum::default();
        for c in 0..CHANNELS {
            let map = ssim_map(self.pred.plane(c), self.gt.plane(c), h, w);
            map.iter()
                .zip(&sel)
                .filter(|(_, s)| **s)
                .for_each(|(v, _)| total.add(*v));
        }
        let count = sel.iter().filter(|s| **s).count() * CHANNELS;
        Ok(total.value() / count as f64)
    }
}

/// `20·log10(1/√mse)`, capped at [`PSNR_CAP`]. Written through the root so a
/// uniform error of exactly 0.1 yields exactly 20 dB.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (20.0 * (1.0 / mse.sqrt()).log10()).min(PSNR_CAP)
}

/// Root mean squared LAB distance over the region's pixels.
pub fn rmse_lab(pred: &Image, gt: &Image, mask: &Mask, region: Region) -> Result<f64> {
    Prepared::new(pred, gt, mask)?.rmse_lab(region)
}

/// Mean squared RGB error over the region's pixels and channels.
pub fn mse(pred: &Image, gt: &Image, mask: &Mask, region: Region) -> Result<f64> {
    Prepared::new(pred, gt, mask)?.mse(region)
}

/// Sum of squared RGB errors and the number of terms.
pub fn sse(pred: &Image, gt: &Image, mask: &Mask, region: Region) -> Result<(f64, usize)> {
    Prepared::new(pred, gt, mask)?.sse(region)
}

pub fn psnr(pred: &Image, gt: &Image, mask: &Mask, region: Region) -> Result<f64> {
    Prepared::new(pred, gt, mask)?.psnr(region)
}

pub fn ssim(pred: &Image, gt: &Image, mask: &Mask, region: Region) -> Result<f64> {
    Prepared::new(pred, gt, mask)?.ssim(region)
}

pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut g: [f64; SSIM_WINDOW] = std::array::from_fn(|i| {
        let d = i as f64 - half;
        (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable Gaussian mean. Near the border the window is truncated to the
/// image and its weights renormalized.
fn gaussian_mean(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let g = gaussian_window();
    let half = SSIM_WINDOW / 2;
    let pass = |src: &[f64], along_x: bool| {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (pos, len) = if along_x { (x, w) } else { (y, h) };
                let lo = pos.saturating_sub(half);
                let hi = (pos + half).min(len - 1);
                let mut acc = 0.0;
                let mut norm = 0.0;
                for q in lo..=hi {
                    let wt = g[q + half - pos];
                    let v = if along_x {
                        src[y * w + q]
                    } else {
                        src[q * w + x]
                    };
                    acc += wt * v;
                    norm += wt;
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

/// Per-pixel SSIM of two planes with dynamic range 1.
pub fn ssim_map(a: &[f64], b: &[f64], h: usize, w: usize) -> Vec<f64> {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = gaussian_mean(a, h, w);
    let mu_b = gaussian_mean(b, h, w);
    let e_aa = gaussian_mean(&prod(a, a), h, w);
    let e_bb = gaussian_mean(&prod(b, b), h, w);
    let e_ab = gaussian_mean(&prod(a, b), h, w);
    (0..h * w)
        .map(|p| {
            let (ma, mb) = (mu_a[p], mu_b[p]);
            let va = e_aa[p] - ma * ma;
            let vb = e_bb[p] - mb * mb;
            let cov = e_ab[p] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect()
}

/// Table row: RMSE, PSNR, SSIM, each over shadow, non-shadow and all pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    #[serde(rename = "rmse_S")]
    pub rmse_s: f64,
    #[serde(rename = "rmse_NS")]
    pub rmse_ns: f64,
    #[serde(rename = "rmse_All")]
    pub rmse_all: f64,
    #[serde(rename = "psnr_S")]
    pub psnr_s: f64,
    #[serde(rename = "psnr_NS")]
    pub psnr_ns: f64,
    #[serde(rename = "psnr_All")]
    pub psnr_all: f64,
    #[serde(rename = "ssim_S")]
    pub ssim_s: f64,
    #[serde(rename = "ssim_NS")]
    pub ssim_ns: f64,
    #[serde(rename = "ssim_All")]
    pub ssim_all: f64,
}

impl RegionReport {
    pub const COLUMNS: [&'static str; 9] = [
        "rmse_S", "rmse_NS", "rmse_All", "psnr_S", "psnr_NS", "psnr_All", "ssim_S", "ssim_NS",
        "ssim_All",
    ];

    pub fn compute(pred: &Image, gt: &Image, mask: &Mask) -> Result<Self> {
        let p = Prepared::new(pred, gt, mask)?;
        Ok(Self {
            rmse_s: p.rmse_lab(Region::Shadow)?,
            rmse_ns: p.rmse_lab(Region::NonShadow)?,
            rmse_all: p.rmse_lab(Region::All)?,
            psnr_s: p.psnr(Region::Shadow)?,
            psnr_ns: p.psnr(Region::NonShadow)?,
            psnr_all: p.psnr(Region::All)?,
            ssim_s: p.ssim(Region::Shadow)?,
            ssim_ns: p.ssim(Region::NonShadow)?,
            ssim_all: p.ssim(Region::All)?,
        })
    }

    /// Values in [`Self::COLUMNS`] order.
    pub fn values(&self) -> [f64; 9] {
        [
            self.rmse_s,
            self.rmse_ns,
            self.rmse_all,
            self.psnr_s,
            self.psnr_ns,
            self.psnr_all,
            self.ssim_s,
            self.ssim_ns,
            self.ssim_all,
        ]
    }

    pub fn from_values(v: [f64; 9]) -> Self {
        Self {
            rmse_s: v[0],
            rmse_ns: v[1],
            rmse_all: v[2],
            psnr_s: v[3],
            psnr_ns: v[4],
            psnr_all: v[5],
            ssim_s: v[6],
            ssim_ns: v[7],
            ssim_all: v[8],
        }
    }

    /// Column-wise mean.
    pub fn mean(reports: &[RegionReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let mut acc = [0.0; 9];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        Some(Self::from_values(acc.map(|a| a / reports.len() as f64)))
    }
}

/// Which ground-truth class was absent, making its error rate undefined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MissingClass {
    Shadow,
    NonShadow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskScores {
    pub ber: f64,
    pub per: f64,
    /// Set when one class rate was dropped from the BER average.
    pub missing: Option<MissingClass>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn of(pred: &Mask, gt: &Mask) -> Result<Self> {
        if pred.dims() != gt.dims() {
            return Err(Error::shape(gt.dims(), pred.dims()));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p == 1, g == 1) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }
}

/// Balanced and pixel error rates, in percent.
pub fn ber_per(pred: &Mask, gt: &Mask) -> Result<MaskScores> {
    let c = Confusion::of(pred, gt)?;
    let total = c.tp + c.tn + c.fp + c.fn_;
    let positives = c.tp + c.fn_;
    let negatives = c.tn + c.fp;
    let per = 100.0 * (c.fp + c.fn_) as f64 / total as f64;
    let (ber, missing) = match (positives, negatives) {
        (0, _) => (
            100.0 * c.fp as f64 / negatives as f64,
            Some(MissingClass::Shadow),
        ),
        (_, 0) => (
            100.0 * c.fn_ as f64 / positives as f64,
            Some(MissingClass::NonShadow),
        ),
        _ => (
            50.0 * (c.fn_ as f64 / positives as f64 + c.fp as f64 / negatives as f64),
            None,
        ),
    };
    Ok(MaskScores { ber, per, missing })
}
