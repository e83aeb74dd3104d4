//! Bilinear resampling with half-pixel centres (align-corners = false).

use crate::error::{shape_err, Result};
use crate::tensor::tape::{GradBuf, Op};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Source taps and weights for one output coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Taps {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: f64,
    pub w_hi: f64,
}

/// Interpolation taps along one axis mapping `src` samples onto `dst`.
///
/// Source coordinate of output `i` is `(i + 0.5)·src/dst − 0.5`, clamped at
/// zero; the upper neighbour is clamped to the last sample.
pub fn axis_taps(src: usize, dst: usize) -> Vec<Taps> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            if src == dst {
                return Taps {
                    lo: i,
                    hi: i,
                    w_lo: 1.0,
                    w_hi: 0.0,
                };
            }
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = pos - lo as f64;
            Taps {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

fn resize_planes<T: Real>(src: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let cast = |t: &Taps| (T::from_f64_lossy(t.w_lo), T::from_f64_lossy(t.w_hi));
    let wy: Vec<_> = ty.iter().map(cast).collect();
    let wx: Vec<_> = tx.iter().map(cast).collect();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for (y, t) in ty.iter().enumerate() {
            let (a, b) = wy[y];
            let r0 = &plane[t.lo * w..(t.lo + 1) * w];
            let r1 = &plane[t.hi * w..(t.hi + 1) * w];
            for (x, s) in tx.iter().enumerate() {
                let (c, d) = wx[x];
                let top = r0[s.lo] * c + r0[s.hi] * d;
                let bottom = r1[s.lo] * c + r1[s.hi] * d;
                out.push(top * a + bottom * b);
            }
        }
    }
    out
}

impl<T: Real> Tape<T> {
    /// Bilinear resize of the two trailing axes to `target_h`×`target_w`.
    ///
    /// When the target equals the source extent the input is passed
    /// through unchanged.
    pub fn bilinear_resize(&mut self, x: Var, target_h: usize, target_w: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if target_h == 0 || target_w == 0 {
            return Err(shape_err!("resize targets must be at least 1, got {target_h}×{target_w}"));
        }
        if (target_h, target_w) == (h, w) {
            return Ok(x);
        }
        let out = resize_planes(self.value(x).data(), b * c, h, w, target_h, target_w);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(vec![b, c, target_h, target_w], out)?, Op::Resize { x }, rg, "bilinear_resize")
    }
}

pub(crate) fn resize_backward<T: Real>(buf: &mut GradBuf<'_, T>, x: Var, out: &Tensor<T>, g: &[T]) {
    let (b, c, h, w) = buf.value(x).dims4().unwrap();
    let (_, _, oh, ow) = out.dims4().unwrap();
    let Some(s) = buf.slot(x) else { return };
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    for p in 0..b * c {
        let dst = &mut s[p * h * w..(p + 1) * h * w];
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        for (y, t) in ty.iter().enumerate() {
            let (a, bb) = (T::from_f64_lossy(t.w_lo), T::from_f64_lossy(t.w_hi));
            for (xx, u) in tx.iter().enumerate() {
                let (cc, d) = (T::from_f64_lossy(u.w_lo), T::from_f64_lossy(u.w_hi));
                let gv = gp[y * ow + xx];
                dst[t.lo * w + u.lo] += gv * a * cc;
                dst[t.lo * w + u.hi] += gv * a * d;
                dst[t.hi * w + u.lo] += gv * bb * cc;
                dst[t.hi * w + u.hi] += gv * bb * d;
            }
        }
    }
}
