use crate::error::{shape_err, Result};
use crate::tensor::tape::{GradBuf, Op};
use crate::tensor::{Real, Tape, Tensor, Var};

impl<T: Real> Tape<T> {
    /// 2×2 max pooling with stride 2. Ties resolve to the first element of
    /// the window in row-major order.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("max_pool2d needs even spatial extents, got {h}×{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(vec![b, c, oh, ow], out)?, Op::MaxPool { x, argmax }, rg, "max_pool2d")
    }
}

pub(crate) fn max_pool_backward<T: Real>(buf: &mut GradBuf<'_, T>, x: Var, argmax: &[u32], g: &[T]) {
    if let Some(s) = buf.slot(x) {
        for (&i, &gv) in argmax.iter().zip(g) {
            s[i as usize] += gv;
        }
    }
}
