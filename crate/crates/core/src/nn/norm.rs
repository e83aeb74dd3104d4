use crate::error::{shape_err, Result};
use crate::tensor::tape::{GradBuf, Op};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics of one normalization instance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Real> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// One batch-normalization instance: affine parameters plus running
/// statistics. Recurrent networks own a separate instance per iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T: Real> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: RunningStats<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNormState {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![channels], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            stats: RunningStats::new(channels),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.stats.mean.len()
    }
}

impl<T: Real> Tape<T> {
    /// Per-channel normalization over batch and spatial axes.
    ///
    /// Training mode normalizes with the batch statistics and folds them
    /// into `stats` (unbiased variance); evaluation mode uses `stats`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        momentum: f64,
        eps: f64,
        training: bool,
    ) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if stats.mean.len() != c || self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(shape_err!(
                "batch_norm: input has {c} channels, state has {}",
                stats.mean.len()
            ));
        }
        let hw = h * w;
        let count = b * hw;
        let src = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let eps_t = T::from_f64_lossy(eps);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if training {
            let n = T::from_usize(count).unwrap();
            for (i, plane) in src.chunks(hw).enumerate() {
                mean[i % c] += plane.iter().copied().sum::<T>();
            }
            mean.iter_mut().for_each(|m| *m /= n);
            for (i, plane) in src.chunks(hw).enumerate() {
                let m = mean[i % c];
                var[i % c] += plane.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
            }
            var.iter_mut().for_each(|v| *v /= n);
            let mom = T::from_f64_lossy(momentum);
            let unbias = if count > 1 {
                n / T::from_usize(count - 1).unwrap()
            } else {
                T::one()
            };
            for ch in 0..c {
                stats.mean[ch] = (T::one() - mom) * stats.mean[ch] + mom * mean[ch];
                stats.var[ch] = (T::one() - mom) * stats.var[ch] + mom * var[ch] * unbias;
            }
        } else {
            mean.copy_from_slice(&stats.mean);
            var.copy_from_slice(&stats.var);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let mut xhat = Vec::with_capacity(src.len());
        let mut out = Vec::with_capacity(src.len());
        for (i, plane) in src.chunks(hw).enumerate() {
            let ch = i % c;
            for &v in plane {
                let xh = (v - mean[ch]) * inv_std[ch];
                xhat.push(xh);
                out.push(gv[ch] * xh + bv[ch]);
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(
            Tensor::new(vec![b, c, h, w], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: training,
            },
            rg,
            "batch_norm",
        )
    }

    /// Applies a stored normalization instance.
    pub fn apply_batch_norm(
        &mut self,
        store: &ParamStore<T>,
        state: &mut BatchNormState<T>,
        x: Var,
        training: bool,
    ) -> Result<Var> {
        let g = self.param(store, state.gamma);
        let b = self.param(store, state.beta);
        let (m, e) = (state.momentum, state.eps);
        self.batch_norm(x, g, b, &mut state.stats, m, e, training)
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward<T: Real>(
    buf: &mut GradBuf<'_, T>,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    batch_stats: bool,
    out: &Tensor<T>,
    g: &[T],
) {
    let (b, c, h, w) = out.dims4().unwrap();
    let hw = h * w;
    let gv = buf.value(gamma).data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (i, (gp, xp)) in g.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
        let ch = i % c;
        for (&gi, &xi) in gp.iter().zip(xp) {
            dgamma[ch] += gi * xi;
            dbeta[ch] += gi;
        }
    }
    if let Some(s) = buf.slot(x) {
        if batch_stats {
            let n = T::from_usize(b * hw).unwrap();
            for (i, ((dst, gp), xp)) in s.chunks_mut(hw).zip(g.chunks(hw)).zip(xhat.chunks(hw)).enumerate() {
                let ch = i % c;
                let k = gv[ch] * inv_std[ch] / n;
                for ((d, &gi), &xi) in dst.iter_mut().zip(gp).zip(xp) {
                    *d += k * (n * gi - dbeta[ch] - xi * dgamma[ch]);
                }
            }
        } else {
            for (i, (dst, gp)) in s.chunks_mut(hw).zip(g.chunks(hw)).enumerate() {
                let ch = i % c;
                let k = gv[ch] * inv_std[ch];
                for (d, &gi) in dst.iter_mut().zip(gp) {
                    *d += k * gi;
                }
            }
        }
    }
    if let Some(s) = buf.slot(gamma) {
        s.iter_mut().zip(&dgamma).for_each(|(d, v)| *d += *v);
    }
    if let Some(s) = buf.slot(beta) {
        s.iter_mut().zip(&dbeta).for_each(|(d, v)| *d += *v);
    }
}
