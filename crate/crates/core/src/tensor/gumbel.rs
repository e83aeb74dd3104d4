//! Column-wise Gumbel-Softmax with a straight-through hard mode.

use rand::Rng;

use super::tape::{GradBuf, Op};
use super::{Real, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Draws standard Gumbel noise `-ln(-ln u)` with `u` strictly inside (0, 1).
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 && u < 1.0 {
            return -(-u.ln()).ln();
        }
    }
}

/// Options for [`Tape::gumbel_softmax`].
#[derive(Clone, Copy, Debug)]
pub struct GumbelOptions {
    pub temperature: f64,
    /// Forward emits exact one-hot columns; backward uses the soft columns.
    pub hard: bool,
    /// Test hook: when false no noise is added, making the op a plain
    /// tempered softmax (plus argmax in hard mode).
    pub noise: bool,
}

impl Default for GumbelOptions {
    fn default() -> Self {
        GumbelOptions {
            temperature: 1.0,
            hard: true,
            noise: true,
        }
    }
}

impl<T: Real> Tape<T> {
    /// Samples one categorical relaxation per column of an N×K logit matrix.
    ///
    /// Every output column is a probability vector over the N rows.
    pub fn gumbel_softmax<R: Rng + ?Sized>(&mut self, logits: Var, opts: GumbelOptions, rng: &mut R) -> Result<Var> {
        if !(opts.temperature > 0.0) || !opts.temperature.is_finite() {
            return Err(Error::Domain(format!(
                "gumbel-softmax temperature must be positive, got {}",
                opts.temperature
            )));
        }
        let (rows, cols) = match self.shape(logits) {
            [r, c] => (*r, *c),
            s => return Err(shape_err!("gumbel-softmax expects an N×K matrix, got {s:?}")),
        };
        let tau = T::from_f64_lossy(opts.temperature);
        let src = self.value(logits).data().to_vec();
        let mut soft = vec![T::zero(); rows * cols];
        let mut out = vec![T::zero(); rows * cols];
        // Noise is drawn row-major so the stream consumed is independent of
        // the temperature and mode.
        let noise: Vec<T> = (0..rows * cols)
            .map(|_| {
                if opts.noise {
                    T::from_f64_lossy(sample_gumbel(rng))
                } else {
                    T::zero()
                }
            })
            .collect();
        for c in 0..cols {
            let z: Vec<T> = (0..rows).map(|r| (src[r * cols + c] + noise[r * cols + c]) / tau).collect();
            let zmax = z.iter().copied().fold(T::neg_infinity(), T::max);
            let e: Vec<T> = z.iter().map(|&v| (v - zmax).exp()).collect();
            let total: T = e.iter().copied().sum();
            let mut best = 0;
            for r in 0..rows {
                soft[r * cols + c] = e[r] / total;
                if z[r] > z[best] {
                    best = r;
                }
            }
            for r in 0..rows {
                out[r * cols + c] = if opts.hard {
                    if r == best {
                        T::one()
                    } else {
                        T::zero()
                    }
                } else {
                    soft[r * cols + c]
                };
            }
        }
        let rg = self.any_grad(&[logits]);
        self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::GumbelSoftmax {
                logits,
                soft,
                rows,
                cols,
                temperature: tau,
            },
            rg,
            "gumbel_softmax",
        )
    }
}

/// Softmax Jacobian of the soft sample, applied to the incoming gradient.
/// In hard mode this is the straight-through estimator.
pub(crate) fn backward<T: Real>(
    buf: &mut GradBuf<'_, T>,
    logits: Var,
    soft: &[T],
    rows: usize,
    cols: usize,
    tau: T,
    g: &[T],
) {
    let Some(s) = buf.slot(logits) else { return };
    for c in 0..cols {
        let dot: T = (0..rows).map(|r| g[r * cols + c] * soft[r * cols + c]).sum();
        for r in 0..rows {
            let i = r * cols + c;
            s[i] += soft[i] * (g[i] - dot) / tau;
        }
    }
}
