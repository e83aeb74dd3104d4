use crate::error::{shape_err, Error, Result};
use crate::tensor::tape::{GradBuf, Op};
use crate::tensor::{Real, Tape, Tensor, Var};

impl<T: Real> Tape<T> {
    /// Mean per-pixel softmax cross-entropy of B×K×H×W logits against a
    /// B×H×W class-index map.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let (b, k, h, w) = self.value(logits).dims4()?;
        let hw = h * w;
        if targets.len() != b * hw {
            return Err(shape_err!("cross-entropy: {} targets for {b}×{h}×{w} pixels", targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= k) {
            return Err(Error::Domain(format!("class index {bad} out of range for {k} classes")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); src.len()];
        let mut total = T::zero();
        for bi in 0..b {
            for p in 0..hw {
                let idx = |c: usize| (bi * k + c) * hw + p;
                let zmax = (0..k).map(|c| src[idx(c)]).fold(T::neg_infinity(), T::max);
                let mut denom = T::zero();
                for c in 0..k {
                    let e = (src[idx(c)] - zmax).exp();
                    probs[idx(c)] = e;
                    denom += e;
                }
                for c in 0..k {
                    probs[idx(c)] /= denom;
                }
                let t = targets[bi * hw + p] as usize;
                total += denom.ln() - (src[idx(t)] - zmax);
            }
        }
        let loss = total / T::from_usize(b * hw).unwrap();
        let rg = self.any_grad(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            rg,
            "softmax_cross_entropy",
        )
    }
}

pub(crate) fn cross_entropy_backward<T: Real>(
    buf: &mut GradBuf<'_, T>,
    logits: Var,
    probs: &[T],
    targets: &[u32],
    _out: &Tensor<T>,
    g: &[T],
) {
    let (b, k, h, w) = buf.value(logits).dims4().unwrap();
    let hw = h * w;
    let scale = g[0] / T::from_usize(b * hw).unwrap();
    let Some(s) = buf.slot(logits) else { return };
    for (i, (d, &p)) in s.iter_mut().zip(probs).enumerate() {
        let bi = i / (k * hw);
        let c = (i / hw) % k;
        let px = i % hw;
        let onehot = if targets[bi * hw + px] as usize == c {
            T::one()
        } else {
            T::zero()
        };
        *d += (p - onehot) * scale;
    }
}
