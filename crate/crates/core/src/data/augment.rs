use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sample;

/// Random transforms applied jointly to image and mask.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub hflip: bool,
    pub vflip: bool,
    /// Maximum absolute rotation in degrees.
    pub rotate_deg: f64,
    /// Maximum absolute shift as a fraction of the extent.
    pub translate: f64,
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && !self.vflip && self.rotate_deg == 0.0 && self.translate == 0.0
    }
}

fn remap(s: &Sample, h: usize, w: usize, src: impl Fn(usize, usize) -> (f64, f64)) -> Sample {
    let c = s.image.len() / (h * w);
    let mut image = vec![0f32; s.image.len()];
    let mut mask = vec![0u8; s.mask.len()];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            let (ny, nx) = (sy.round(), sx.round());
            if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                mask[y * w + x] = s.mask[ny as usize * w + nx as usize];
            }
            for ch in 0..c {
                image[ch * h * w + y * w + x] = bilinear(&s.image[ch * h * w..(ch + 1) * h * w], h, w, sy, sx);
            }
        }
    }
    Sample {
        image,
        mask,
        seed: s.seed,
        index: s.index,
    }
}

/// Bilinear sample with zero outside the plane.
fn bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize] as f64
        }
    };
    let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
        + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0));
    v as f32
}

fn flip(s: &Sample, h: usize, w: usize, horizontal: bool) -> Sample {
    let mut out = s.clone();
    let idx = |y: usize, x: usize| if horizontal { y * w + (w - 1 - x) } else { (h - 1 - y) * w + x };
    for y in 0..h {
        for x in 0..w {
            out.mask[y * w + x] = s.mask[idx(y, x)];
        }
    }
    let c = s.image.len() / (h * w);
    for ch in 0..c {
        let o = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                out.image[o + y * w + x] = s.image[o + idx(y, x)];
            }
        }
    }
    out
}

pub fn hflip(s: &Sample, h: usize, w: usize) -> Sample {
    flip(s, h, w, true)
}

pub fn vflip(s: &Sample, h: usize, w: usize) -> Sample {
    flip(s, h, w, false)
}

/// Rotation about the image centre; uncovered pixels become background.
pub fn rotate(s: &Sample, h: usize, w: usize, degrees: f64) -> Sample {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    remap(s, h, w, |y, x| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        (cy + cos * dy - sin * dx, cx + sin * dy + cos * dx)
    })
}

/// Integer shift by `(dy, dx)` pixels.
pub fn translate(s: &Sample, h: usize, w: usize, dy: i64, dx: i64) -> Sample {
    remap(s, h, w, |y, x| (y as f64 - dy as f64, x as f64 - dx as f64))
}

/// Draws one transform set from `policy` and applies it.
pub fn augment(s: &Sample, h: usize, w: usize, policy: &AugmentPolicy, rng: &mut impl Rng) -> Sample {
    let mut out = s.clone();
    if policy.hflip && rng.gen_bool(0.5) {
        out = hflip(&out, h, w);
    }
    if policy.vflip && rng.gen_bool(0.5) {
        out = vflip(&out, h, w);
    }
    if policy.rotate_deg > 0.0 {
        let a = rng.gen_range(-policy.rotate_deg..=policy.rotate_deg);
        out = rotate(&out, h, w, a);
    }
    if policy.translate > 0.0 {
        let my = (policy.translate * h as f64).round() as i64;
        let mx = (policy.translate * w as f64).round() as i64;
        let (dy, dx) = (rng.gen_range(-my..=my), rng.gen_range(-mx..=mx));
        if dy != 0 || dx != 0 {
            out = translate(&out, h, w, dy, dx);
        }
    }
    out
}
