//! 2-D convolution and its transpose, lowered to GEMM through im2col.

use crate::error::{shape_err, Result};
use crate::tensor::tape::{GradBuf, Op};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Geometry of one im2col lowering.
#[derive(Clone, Copy, Debug)]
struct Window {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &Window, cols: &mut [T]) {
    let ncols = g.cols();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto the image.
fn col2im<T: Real>(cols: &[T], g: &Window, x: &mut [T]) {
    let ncols = g.cols();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn output_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = input + 2 * pad;
    if stride == 0 || span < k || !(span - k).is_multiple_of(stride) {
        return Err(shape_err!(
            "convolution extent is not integral: input {input}, kernel {k}, stride {stride}, padding {pad}"
        ));
    }
    Ok((span - k) / stride + 1)
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], hw: usize) {
    for (plane, &b) in out.chunks_mut(hw).zip(bias.iter().cycle()) {
        plane.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Real>(g: &[T], cout: usize, hw: usize, db: &mut [T]) {
    for (i, plane) in g.chunks(hw).enumerate() {
        db[i % cout] += plane.iter().copied().sum::<T>();
    }
}

impl<T: Real> Tape<T> {
    /// Cross-correlation of a B×C×H×W input with a C'×C×kh×kw kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (bn, c, h, wd) = self.value(x).dims4()?;
        let (cout, cin, kh, kw) = self.value(w).dims4()?;
        if cin != c {
            return Err(shape_err!("conv2d: kernel expects {cin} input channels, input has {c}"));
        }
        if let Some(bv) = b {
            if self.shape(bv) != [cout] {
                return Err(shape_err!("conv2d: bias shape {:?} for {cout} outputs", self.shape(bv)));
            }
        }
        let geo = Window {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh: output_extent(h, kh, stride, pad)?,
            ow: output_extent(wd, kw, stride, pad)?,
        };
        let out = conv_forward(self.value(x).data(), self.value(w).data(), b.map(|v| self.value(v).data()), bn, cout, &geo);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        self.push(
            Tensor::new(vec![bn, cout, geo.oh, geo.ow], out)?,
            Op::Conv2d { x, w, b, stride, pad },
            rg,
            "conv2d",
        )
    }

    /// Transposed convolution (no padding) with a C×C'×k×k kernel; output
    /// extent is `(H − 1)·stride + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (bn, c, h, wd) = self.value(x).dims4()?;
        let (cin, cout, kh, kw) = self.value(w).dims4()?;
        if cin != c {
            return Err(shape_err!("conv_transpose2d: kernel expects {cin} input channels, input has {c}"));
        }
        if stride == 0 {
            return Err(shape_err!("conv_transpose2d: stride must be positive"));
        }
        let (oh, ow) = ((h - 1) * stride + kh, (wd - 1) * stride + kw);
        // The output grid seen through a strided window of the same kernel
        // maps back onto the input grid.
        let geo = Window {
            c: cout,
            h: oh,
            w: ow,
            kh,
            kw,
            stride,
            pad: 0,
            oh: h,
            ow: wd,
        };
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![T::zero(); bn * cout * oh * ow];
        let mut cols = vec![T::zero(); geo.rows() * geo.cols()];
        for bi in 0..bn {
            let xb = &xs[bi * c * h * wd..(bi + 1) * c * h * wd];
            matmul_tn(geo.rows(), c, geo.cols(), ws, xb, &mut cols, true);
            col2im(&cols, &geo, &mut out[bi * cout * oh * ow..(bi + 1) * cout * oh * ow]);
        }
        if let Some(bv) = b {
            add_bias(&mut out, self.value(bv).data(), oh * ow);
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        self.push(
            Tensor::new(vec![bn, cout, oh, ow], out)?,
            Op::ConvTranspose2d { x, w, b, stride },
            rg,
            "conv_transpose2d",
        )
    }

    /// Convenience wrapper applying a stored [`ConvParams`] layer.
    pub fn apply_conv(&mut self, store: &ParamStore<T>, p: &ConvParams, x: Var) -> Result<Var> {
        let w = self.param(store, p.weight);
        let b = p.bias.map(|id| self.param(store, id));
        if p.transposed {
            self.conv_transpose2d(x, w, b, p.stride)
        } else {
            self.conv2d(x, w, b, p.stride, p.padding)
        }
    }
}

fn conv_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, bn: usize, cout: usize, geo: &Window) -> Vec<T> {
    let in_sz = geo.c * geo.h * geo.w;
    let out_sz = cout * geo.cols();
    let mut out = vec![T::zero(); bn * out_sz];
    let mut cols = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); geo.rows() * geo.cols()]
    };
    for bi in 0..bn {
        let xb = &x[bi * in_sz..(bi + 1) * in_sz];
        let ob = &mut out[bi * out_sz..(bi + 1) * out_sz];
        if geo.is_pointwise() {
            matmul_nn(cout, geo.rows(), geo.cols(), w, xb, ob, true);
        } else {
            im2col(xb, geo, &mut cols);
            matmul_nn(cout, geo.rows(), geo.cols(), w, &cols, ob, true);
        }
    }
    if let Some(bias) = bias {
        add_bias(&mut out, bias, geo.cols());
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    buf: &mut GradBuf<'_, T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
    out: &Tensor<T>,
    g: &[T],
) {
    let (xv, wv) = (buf_value(buf, x), buf_value(buf, w));
    let (bn, c, h, wd) = xv.dims4().unwrap();
    let (cout, _, kh, kw) = wv.dims4().unwrap();
    let (_, _, oh, ow) = out.dims4().unwrap();
    let geo = Window {
        c,
        h,
        w: wd,
        kh,
        kw,
        stride,
        pad,
        oh,
        ow,
    };
    let (in_sz, out_sz) = (c * h * wd, cout * oh * ow);
    let xs = xv.data();
    let ws = wv.data();
    let mut cols = vec![T::zero(); geo.rows() * geo.cols()];
    if buf.wants(w) {
        let mut dw = vec![T::zero(); wv.numel()];
        for bi in 0..bn {
            let xb = &xs[bi * in_sz..(bi + 1) * in_sz];
            let gb = &g[bi * out_sz..(bi + 1) * out_sz];
            if geo.is_pointwise() {
                matmul_nt(cout, geo.cols(), geo.rows(), gb, xb, &mut dw, false);
            } else {
                im2col(xb, &geo, &mut cols);
                matmul_nt(cout, geo.cols(), geo.rows(), gb, &cols, &mut dw, false);
            }
        }
        let s = buf.slot(w).unwrap();
        s.iter_mut().zip(&dw).for_each(|(d, v)| *d += *v);
    }
    if let Some(bv) = b {
        if let Some(s) = buf.slot(bv) {
            bias_grad(g, cout, oh * ow, s);
        }
    }
    if buf.wants(x) {
        let ws = ws.to_vec();
        let s = buf.slot(x).unwrap();
        for bi in 0..bn {
            let gb = &g[bi * out_sz..(bi + 1) * out_sz];
            let dx = &mut s[bi * in_sz..(bi + 1) * in_sz];
            if geo.is_pointwise() {
                matmul_tn(geo.rows(), cout, geo.cols(), &ws, gb, dx, false);
            } else {
                matmul_tn(geo.rows(), cout, geo.cols(), &ws, gb, &mut cols, true);
                col2im(&cols, &geo, dx);
            }
        }
    }
}

pub(crate) fn conv_transpose2d_backward<T: Real>(
    buf: &mut GradBuf<'_, T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    out: &Tensor<T>,
    g: &[T],
) {
    let (xv, wv) = (buf_value(buf, x), buf_value(buf, w));
    let (bn, c, h, wd) = xv.dims4().unwrap();
    let (_, cout, kh, kw) = wv.dims4().unwrap();
    let (_, _, oh, ow) = out.dims4().unwrap();
    let geo = Window {
        c: cout,
        h: oh,
        w: ow,
        kh,
        kw,
        stride,
        pad: 0,
        oh: h,
        ow: wd,
    };
    let (in_sz, out_sz) = (c * h * wd, cout * oh * ow);
    let xs = xv.data().to_vec();
    let ws = wv.data().to_vec();
    let mut gcols = vec![T::zero(); geo.rows() * geo.cols()];
    let want_w = buf.wants(w);
    let want_x = buf.wants(x);
    let mut dw = vec![T::zero(); if want_w { ws.len() } else { 0 }];
    let mut dx = vec![T::zero(); if want_x { xs.len() } else { 0 }];
    for bi in 0..bn {
        let gb = &g[bi * out_sz..(bi + 1) * out_sz];
        im2col(gb, &geo, &mut gcols);
        if want_x {
            matmul_nn(c, geo.rows(), geo.cols(), &ws, &gcols, &mut dx[bi * in_sz..(bi + 1) * in_sz], false);
        }
        if want_w {
            let xb = &xs[bi * in_sz..(bi + 1) * in_sz];
            matmul_nt(c, geo.cols(), geo.rows(), xb, &gcols, &mut dw, false);
        }
    }
    if let Some(s) = buf.slot(x) {
        s.iter_mut().zip(&dx).for_each(|(d, v)| *d += *v);
    }
    if let Some(s) = buf.slot(w) {
        s.iter_mut().zip(&dw).for_each(|(d, v)| *d += *v);
    }
    if let Some(bv) = b {
        if let Some(s) = buf.slot(bv) {
            bias_grad(g, cout, oh * ow, s);
        }
    }
}

fn buf_value<'a, T: Real>(buf: &GradBuf<'a, T>, v: Var) -> &'a Tensor<T> {
    buf.value(v)
}

/// A stored convolution layer: weight, optional bias and geometry.
///
/// Plain kernels are out×in×kh×kw; transposed kernels are in×out×kh×kw.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl ConvParams {
    /// Registers a new layer in `store` with Kaiming-uniform weights and
    /// zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: rand::Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        transposed: bool,
        rng: &mut R,
    ) -> Self {
        let shape = if transposed {
            vec![in_ch, out_ch, kernel, kernel]
        } else {
            vec![out_ch, in_ch, kernel, kernel]
        };
        let fan_in = if transposed { out_ch } else { in_ch } * kernel * kernel;
        let weight = store.add(format!("{name}.weight"), super::init::kaiming_uniform(shape, fan_in, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_ch]));
        ConvParams {
            weight,
            bias: Some(bias),
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            transposed,
        }
    }

    /// `out·in·k·k + out` (bias included when present).
    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + if self.bias.is_some() { self.out_ch } else { 0 }
    }

    /// Output extent for an input extent.
    pub fn output_extent(&self, input: usize) -> Result<usize> {
        if self.transposed {
            Ok((input - 1) * self.stride + self.kernel)
        } else {
            output_extent(input, self.kernel, self.stride, self.padding)
        }
    }

    /// Multiply-accumulates for one sample at the given input size.
    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let per_window = (self.in_ch * self.out_ch * self.kernel * self.kernel) as u64;
        Ok(if self.transposed {
            per_window * (h * w) as u64
        } else {
            per_window * (self.output_extent(h)? * self.output_extent(w)?) as u64
        })
    }
}
