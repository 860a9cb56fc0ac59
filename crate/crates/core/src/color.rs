//! sRGB <-> CIE L*a*b* (D65).
//!
//! The reference white is the XYZ image of sRGB white under the matrix below,
//! so `(1, 1, 1)` maps to `L = 100, a = b = 0` without rounding residue.

use crate::image::Image;

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const DELTA: f64 = 6.0 / 29.0;

fn white() -> [f64; 3] {
    RGB_TO_XYZ.map(|row| row.iter().sum())
}

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA.powi(3) {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t.powi(3)
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

pub fn srgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let wn = white();
    let mut f = [0.0; 3];
    for (i, row) in RGB_TO_XYZ.iter().enumerate() {
        let xyz: f64 = row.iter().zip(lin).map(|(m, v)| m * v).sum();
        f[i] = lab_f(xyz / wn[i]);
    }
    [
        116.0 * f[1] - 16.0,
        500.0 * (f[0] - f[1]),
        200.0 * (f[1] - f[2]),
    ]
}

pub fn lab_pixel_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let wn = white();
    let xyz = [
        lab_f_inv(fx) * wn[0],
        lab_f_inv(fy) * wn[1],
        lab_f_inv(fz) * wn[2],
    ];
    let inv = invert3(RGB_TO_XYZ);
    inv.map(|row| {
        let lin: f64 = row.iter().zip(xyz).map(|(m, v)| m * v).sum();
        linear_to_srgb(lin)
    })
}

/// LAB values of every pixel, channel-planar (`L`, `a`, `b`). Not an
/// [`Image`] because the channels leave `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl LabImage {
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

pub fn rgb_to_lab(img: &Image) -> LabImage {
    let (h, w) = img.dims();
    let n = h * w;
    let mut data = vec![0.0; 3 * n];
    for y in 0..h {
        for x in 0..w {
            let lab = srgb_pixel_to_lab(img.pixel(y, x));
            for (c, v) in lab.into_iter().enumerate() {
                data[c * n + y * w + x] = v;
            }
        }
    }
    LabImage {
        height: h,
        width: w,
        data,
    }
}

fn invert3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            // cofactor of (j, i)
            let (r0, r1) = match j {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let (c0, c1) = match i {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let minor = m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            *v = sign * minor / det;
        }
    }
    out
}
