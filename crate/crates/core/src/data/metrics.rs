use serde::Serialize;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Overlap scores of one class.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub iou: f64,
    pub dice: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Absent from both prediction and target; scored 1 and left out of the means.
    pub empty: bool,
}

/// Per-class scores and their means over the non-empty foreground classes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub classes: Vec<ClassMetrics>,
    pub miou: f64,
    pub dice: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Pixel confusion counts accumulated over any number of masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    classes: usize,
    /// `counts[truth * K + pred]`
    counts: Vec<u64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add<P, Q>(&mut self, pred: &[P], truth: &[Q]) -> Result<()>
    where
        P: Copy + Into<u32>,
        Q: Copy + Into<u32>,
    {
        if pred.len() != truth.len() {
            return Err(shape_err!("metrics: prediction has {} pixels, target {}", pred.len(), truth.len()));
        }
        let k = self.classes as u32;
        for (&p, &t) in pred.iter().zip(truth) {
            let (p, t) = (p.into(), t.into());
            if p >= k || t >= k {
                return Err(Error::Domain(format!("metrics: class {} out of range 0..{k}", p.max(t))));
            }
            self.counts[(t * k + p) as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    fn class(&self, c: usize) -> ClassMetrics {
        let k = self.classes;
        let total: u64 = self.counts.iter().sum();
        let tp = self.counts[c * k + c];
        let truth: u64 = self.counts[c * k..(c + 1) * k].iter().sum();
        let pred: u64 = (0..k).map(|t| self.counts[t * k + c]).sum();
        let (fn_, fp) = (truth - tp, pred - tp);
        let tn = total - tp - fn_ - fp;
        ClassMetrics {
            class: c,
            iou: ratio(tp, tp + fp + fn_),
            dice: ratio(2 * tp, 2 * tp + fp + fn_),
            sensitivity: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
            empty: truth == 0 && pred == 0,
        }
    }

    /// Scores for classes `1..K`; class 0 is background.
    pub fn metrics(&self) -> Metrics {
        let classes: Vec<ClassMetrics> = (1..self.classes).map(|c| self.class(c)).collect();
        let used: Vec<&ClassMetrics> = classes.iter().filter(|m| !m.empty).collect();
        let mean = |f: fn(&ClassMetrics) -> f64| {
            if used.is_empty() {
                1.0
            } else {
                used.iter().map(|m| f(m)).sum::<f64>() / used.len() as f64
            }
        };
        Metrics {
            miou: mean(|m| m.iou),
            dice: mean(|m| m.dice),
            sensitivity: mean(|m| m.sensitivity),
            specificity: mean(|m| m.specificity),
            classes,
        }
    }
}

impl Metrics {
    /// Scores one prediction against one target.
    pub fn of<P, Q>(pred: &[P], truth: &[Q], classes: usize) -> Result<Metrics>
    where
        P: Copy + Into<u32>,
        Q: Copy + Into<u32>,
    {
        let mut c = Confusion::new(classes);
        c.add(pred, truth)?;
        Ok(c.metrics())
    }
}

/// Per-pixel arg-max over the channel axis of `N × K × H × W` logits; ties pick the lower class.
pub fn argmax_classes<T: Real>(logits: &Tensor<T>) -> Result<Vec<u32>> {
    let (b, k, h, w) = logits.dims4()?;
    let hw = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(b * hw);
    for n in 0..b {
        let base = n * k * hw;
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[base + c * hw + p] > d[base + best * hw + p] {
                    best = c;
                }
            }
            out.push(best as u32);
        }
    }
    Ok(out)
}
