//! Procedural textures and synthetic shadow pairs.
//!
//! A shadow is a multiplicative darkening confined to a rasterized shape.
//! With a soft boundary the darkening ramps up from the mask edge inward, so
//! pixels outside the mask are never touched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask, ShadowSample};

/// Attempts before a degenerate (empty or full-frame) shape is reported.
pub const MAX_SHAPE_ATTEMPTS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Polygon,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShadowParams {
    pub shape: ShapeKind,
    /// Multiplicative factor applied deep inside the shadow; in `(0, 1)`.
    pub attenuation: f64,
    /// Width in pixels of the inner penumbra ramp; 0 gives a hard edge.
    pub softness: f64,
}

impl ShadowParams {
    /// Draws generator parameters for dataset synthesis.
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            shape: if rng.random_bool(0.5) {
                ShapeKind::Ellipse
            } else {
                ShapeKind::Polygon
            },
            attenuation: rng.random_range(0.3..0.7),
            softness: rng.random_range(0.0..3.0),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.attenuation > 0.0 && self.attenuation < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "attenuation must lie in (0, 1), got {}",
                self.attenuation
            )));
        }
        if !(self.softness >= 0.0 && self.softness.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "softness must be finite and >= 0, got {}",
                self.softness
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Shape {
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        angle: f64,
    },
    Polygon(Vec<(f64, f64)>),
}

impl Shape {
    fn random(kind: ShapeKind, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let (hf, wf) = (h as f64, w as f64);
        let side = hf.min(wf);
        let cy = rng.random_range(0.2..0.8) * hf;
        let cx = rng.random_range(0.2..0.8) * wf;
        match kind {
            ShapeKind::Ellipse => Shape::Ellipse {
                cy,
                cx,
                ry: rng.random_range(0.12..0.35) * side,
                rx: rng.random_range(0.12..0.35) * side,
                angle: rng.random_range(0.0..std::f64::consts::PI),
            },
            ShapeKind::Polygon => {
                let n = rng.random_range(3..=7);
                let mut angles: Vec<f64> = (0..n)
                    .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                    .collect();
                angles.sort_by(f64::total_cmp);
                Shape::Polygon(
                    angles
                        .into_iter()
                        .map(|a| {
                            let r = rng.random_range(0.15..0.45) * side;
                            (cy + r * a.sin(), cx + r * a.cos())
                        })
                        .collect(),
                )
            }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Shape::Ellipse {
                cy,
                cx,
                ry,
                rx,
                angle,
            } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon(pts) => {
                // even-odd rule
                let mut inside = false;
                let mut j = pts.len() - 1;
                for i in 0..pts.len() {
                    let (yi, xi) = pts[i];
                    let (yj, xj) = pts[j];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }

    fn rasterize(&self, h: usize, w: usize) -> Result<Mask> {
        Mask::from_fn(h, w, |y, x| self.contains(y as f64 + 0.5, x as f64 + 0.5))
    }
}

/// Two-pass chamfer distance (in pixels) from every mask pixel to the nearest
/// pixel outside the mask; 0 outside.
fn inner_distance(mask: &Mask) -> Vec<f64> {
    let (h, w) = mask.dims();
    let big = (h + w) as f64 * 2.0;
    let mut d: Vec<f64> = mask
        .data()
        .iter()
        .map(|&v| if v == 1 { big } else { 0.0 })
        .collect();
    let (a, b) = (1.0, std::f64::consts::SQRT_2);
    let at = |d: &Vec<f64>, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            // the frame border counts as outside
            0.0
        } else {
            d[y as usize * w + x as usize]
        }
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            if d[i] == 0.0 {
                continue;
            }
            let v = d[i]
                .min(at(&d, y, x - 1) + a)
                .min(at(&d, y - 1, x) + a)
                .min(at(&d, y - 1, x - 1) + b)
                .min(at(&d, y - 1, x + 1) + b);
            d[i] = v;
        }
    }
    for y in (0..h as isize).rev() {
        for x in (0..w as isize).rev() {
            let i = y as usize * w + x as usize;
            if d[i] == 0.0 {
                continue;
            }
            let v = d[i]
                .min(at(&d, y, x + 1) + a)
                .min(at(&d, y + 1, x) + a)
                .min(at(&d, y + 1, x + 1) + b)
                .min(at(&d, y + 1, x - 1) + b);
            d[i] = v;
        }
    }
    d
}

/// Darkens `base` inside a random shape drawn from `seed`.
pub fn synth_shadow(
    base: &Image,
    seed: u64,
    params: &ShadowParams,
    id: &str,
) -> Result<ShadowSample> {
    params.validate()?;
    let (h, w) = base.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = None;
    for _ in 0..MAX_SHAPE_ATTEMPTS {
        let m = Shape::random(params.shape, h, w, &mut rng).rasterize(h, w)?;
        let area = m.count();
        if area > 0 && area < h * w {
            mask = Some(m);
            break;
        }
    }
    let mask = mask.ok_or(Error::DegenerateShape {
        attempts: MAX_SHAPE_ATTEMPTS,
    })?;

    let dist = inner_distance(&mask);
    let darkening = 1.0 - params.attenuation;
    let factor: Vec<f64> = dist
        .iter()
        .map(|&d| {
            if d == 0.0 {
                1.0
            } else {
                let weight = if params.softness == 0.0 {
                    1.0
                } else {
                    (d / params.softness).min(1.0)
                };
                1.0 - darkening * weight
            }
        })
        .collect();
    let shadow = Image::from_fn(h, w, |c, y, x| base.get(c, y, x) * factor[y * w + x])?;
    ShadowSample::new(shadow, base.clone(), mask, id)
}

/// Smooth colored texture: a two-color gradient, a few oriented gratings and
/// some flat patches with hard edges.
pub fn procedural_texture(h: usize, w: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        std::array::from_fn(|_| rng.random_range(0.25..0.95))
    };
    let c0 = color(&mut rng);
    let c1 = color(&mut rng);
    let gdir = rng.random_range(0.0..std::f64::consts::TAU);
    let gratings: Vec<_> = (0..rng.random_range(2..5))
        .map(|_| {
            let freq = rng.random_range(0.05..0.6);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.12..0.12));
            (freq, theta, phase, amp)
        })
        .collect();
    let patches: Vec<_> = (0..rng.random_range(1..4))
        .map(|_| {
            let y0 = rng.random_range(0..h);
            let x0 = rng.random_range(0..w);
            let ph = rng.random_range(1..=h / 3 + 1);
            let pw = rng.random_range(1..=w / 3 + 1);
            (y0, x0, ph, pw, color(&mut rng))
        })
        .collect();
    let (hf, wf) = (h as f64, w as f64);
    Image::from_fn(h, w, |c, y, x| {
        if let Some(p) = patches
            .iter()
            .find(|(y0, x0, ph, pw, _)| y >= *y0 && y < y0 + ph && x >= *x0 && x < x0 + pw)
        {
            return p.4[c];
        }
        let (yf, xf) = (y as f64 / hf, x as f64 / wf);
        let t =
            (0.5 + 0.5 * ((xf - 0.5) * gdir.cos() + (yf - 0.5) * gdir.sin()) * 1.4).clamp(0.0, 1.0);
        let mut v = c0[c] * (1.0 - t) + c1[c] * t;
        for (freq, theta, phase, amp) in &gratings {
            let u = x as f64 * theta.cos() + y as f64 * theta.sin();
            v += amp[c] * (freq * u + phase).sin();
        }
        v.clamp(0.05, 0.98)
    })
}

/// Deterministic per-index seed derived from a dataset seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.random()
}

/// Generates `count` synthetic pairs of size `size`x`size`.
pub fn generate_samples(count: usize, size: usize, seed: u64) -> Result<Vec<ShadowSample>> {
    (0..count)
        .map(|i| {
            let s = derive_seed(seed, i as u64);
            let base = procedural_texture(size, size, s)?;
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x5eed);
            let params = ShadowParams::random(&mut rng);
            synth_shadow(
                &base,
                s.wrapping_add(1),
                &params,
                &format!("{seed:x}_{i:04}"),
            )
        })
        .collect()
}
