//! Synthetic segmentation data, augmentation and overlap metrics.

mod augment;
mod io;
mod metrics;

pub use augment::{augment, hflip, rotate, translate, vflip, AugmentPolicy};
pub use io::{load_dataset, save_dataset};
pub use metrics::{argmax_classes, ClassMetrics, Confusion, Metrics};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Foreground pixel fraction every generated sample falls into.
pub const FOREGROUND_BAND: (f64, f64) = (0.05, 0.6);

/// One image with its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `C × H × W`, values in `[0, 1]`.
    pub image: Vec<f32>,
    /// `H × W` class indices.
    pub mask: Vec<u8>,
    pub seed: u64,
    /// Position in the generator stream.
    pub index: u64,
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub height: usize,
    pub width: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub classes: usize,
    #[serde(default)]
    pub noise: f64,
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl DataSpec {
    pub fn new(height: usize, width: usize, classes: usize, noise: f64, seed: u64) -> Self {
        DataSpec {
            height,
            width,
            channels: 1,
            classes,
            noise,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 256 {
            return Err(Error::Domain(format!("classes must be in 2..=256, got {}", self.classes)));
        }
        if self.height < 8 || self.width < 8 || self.channels == 0 {
            return Err(Error::Domain(format!(
                "image must be at least 8x8 with one channel, got {}x{}x{}",
                self.channels, self.height, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Domain(format!("noise must be in [0, 1], got {}", self.noise)));
        }
        Ok(())
    }

    /// Intensity of class `k` at zero noise.
    pub fn level(&self, k: usize) -> f32 {
        (0.1 + 0.8 * k as f64 / (self.classes - 1) as f64) as f32
    }
}

/// A generated or loaded set of samples sharing one geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same geometry, no samples.
    pub fn clone_header(&self) -> Dataset {
        Dataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            classes: self.classes,
            samples: Vec::new(),
        }
    }

    /// Checks the image extent against a network with `depth` pooling levels.
    pub fn check_divisible(&self, depth: usize) -> Result<()> {
        let m = 1usize << depth;
        if !self.height.is_multiple_of(m) || !self.width.is_multiple_of(m) {
            return Err(Error::Domain(format!(
                "{}x{} images are not divisible by {m}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Stacks the chosen samples into an `N × C × H × W` tensor plus flat targets.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> (Tensor<T>, Vec<u32>) {
        let per = self.channels * self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut targets = Vec::with_capacity(indices.len() * self.height * self.width);
        for &i in indices {
            let s = &self.samples[i];
            data.extend(s.image.iter().map(|&v| T::from_f64_lossy(v as f64)));
            targets.extend(s.mask.iter().map(|&m| m as u32));
        }
        let t = Tensor::new(vec![indices.len(), self.channels, self.height, self.width], data)
            .expect("sample sizes agree");
        (t, targets)
    }

    /// Fraction of non-background pixels over the whole set.
    pub fn foreground_fraction(&self) -> f64 {
        let total: usize = self.samples.iter().map(|s| s.mask.len()).sum();
        let fg: usize = self.samples.iter().map(|s| s.mask.iter().filter(|&&m| m != 0).count()).sum();
        fg as f64 / total.max(1) as f64
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, cos: f64, sin: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx, cos, sin } => {
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
        }
    }

    fn random(rng: &mut ChaCha8Rng, h: f64, w: f64) -> Shape {
        let s = h.min(w);
        let cy = rng.gen_range(0.15 * h..0.85 * h);
        let cx = rng.gen_range(0.15 * w..0.85 * w);
        let ry = rng.gen_range(0.06 * s..0.18 * s);
        let rx = rng.gen_range(0.06 * s..0.18 * s);
        if rng.gen_bool(0.5) {
            let a: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            Shape::Ellipse { cy, cx, ry, rx, cos: a.cos(), sin: a.sin() }
        } else {
            Shape::Rect { y0: cy - ry, x0: cx - rx, y1: cy + ry, x1: cx + rx }
        }
    }
}

fn paint_mask(spec: &DataSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (h, w) = (spec.height, spec.width);
    let fg_pixels = |m: &[u8]| m.iter().filter(|&&v| v != 0).count() as f64 / m.len() as f64;
    loop {
        let mut mask = vec![0u8; h * w];
        for class in 1..spec.classes {
            for _ in 0..rng.gen_range(1..=5) {
                let shape = Shape::random(rng, h as f64, w as f64);
                for y in 0..h {
                    for x in 0..w {
                        if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                            mask[y * w + x] = class as u8;
                        }
                    }
                }
            }
        }
        let f = fg_pixels(&mask);
        if f >= FOREGROUND_BAND.0 && f <= FOREGROUND_BAND.1 {
            return mask;
        }
    }
}

/// Generates sample `index`; the same `(spec, index)` always yields the same bits.
pub fn generate_sample(spec: &DataSpec, index: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let (h, w) = (spec.height, spec.width);
    let mask = paint_mask(spec, &mut rng);
    let noise = spec.noise;
    let gauss = Normal::new(0.0, 0.5 * noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut image = Vec::with_capacity(spec.channels * h * w);
    for _ in 0..spec.channels {
        let (fy, fx) = (rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5));
        let (py, px) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
        for y in 0..h {
            for x in 0..w {
                let k = mask[y * w + x] as usize;
                let mut v = spec.level(k) as f64;
                if noise > 0.0 {
                    let texture = (fy * y as f64 + py).sin() * (fx * x as f64 + px).sin();
                    v += 0.3 * noise * texture + gauss.sample(&mut rng);
                }
                image.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Sample {
        image,
        mask,
        seed: spec.seed,
        index,
    }
}

/// Generates samples `offset .. offset + n`.
pub fn generate_range(spec: &DataSpec, offset: u64, n: usize) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        channels: spec.channels,
        height: spec.height,
        width: spec.width,
        classes: spec.classes,
        samples: (0..n as u64).map(|i| generate_sample(spec, offset + i)).collect(),
    })
}

/// `n` samples with `K = classes`.
pub fn generate_dataset(n: usize, height: usize, width: usize, classes: usize, noise: f64, seed: u64) -> Result<Dataset> {
    generate_range(&DataSpec::new(height, width, classes, noise, seed), 0, n)
}

/// Disjoint train and validation sets drawn from one seed.
pub fn generate_split(spec: &DataSpec, train: usize, val: usize) -> Result<(Dataset, Dataset)> {
    Ok((generate_range(spec, 0, train)?, generate_range(spec, train as u64, val)?))
}
