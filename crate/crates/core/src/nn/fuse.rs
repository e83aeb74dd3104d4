//! Stream fusion: channel concatenation, element-wise averaging and the
//! selection-matrix average over unique chosen streams.

use crate::error::{shape_err, Error, Result};
use crate::tensor::tape::{GradBuf, Op};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Concat,
    Average,
}

/// Element-wise mean of equally shaped arrays, summed in the given order.
pub(crate) fn mean_of<T: Real>(parts: &[&[T]]) -> Vec<T> {
    let mut acc = parts[0].to_vec();
    for p in &parts[1..] {
        acc.iter_mut().zip(p.iter()).for_each(|(a, b)| *a += *b);
    }
    let k = T::from_usize(parts.len()).unwrap();
    acc.iter_mut().for_each(|a| *a /= k);
    acc
}

impl<T: Real> Tape<T> {
    pub fn fuse(&mut self, streams: &[Var], mode: FusionMode) -> Result<Var> {
        match mode {
            FusionMode::Concat => self.concat(streams),
            FusionMode::Average => self.average(streams),
        }
    }

    /// Stacks B×Cᵢ×H×W streams along the channel axis.
    pub fn concat(&mut self, streams: &[Var]) -> Result<Var> {
        let first = *streams.first().ok_or_else(|| Error::Contract("fuse needs at least one stream".into()))?;
        if streams.len() == 1 {
            return Ok(first);
        }
        let (b, _, h, w) = self.value(first).dims4()?;
        let mut chans = Vec::with_capacity(streams.len());
        for &s in streams {
            let (sb, sc, sh, sw) = self.value(s).dims4()?;
            if (sb, sh, sw) != (b, h, w) {
                return Err(shape_err!(
                    "concat: stream {:?} incompatible with {:?}",
                    self.shape(s),
                    self.shape(first)
                ));
            }
            chans.push(sc);
        }
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(b * total * hw);
        for bi in 0..b {
            for (&s, &c) in streams.iter().zip(&chans) {
                let d = self.value(s).data();
                out.extend_from_slice(&d[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let rg = self.any_grad(streams);
        self.push(Tensor::new(vec![b, total, h, w], out)?, Op::Concat(streams.to_vec()), rg, "concat")
    }

    /// Element-wise mean of equally shaped streams.
    pub fn average(&mut self, streams: &[Var]) -> Result<Var> {
        let first = *streams.first().ok_or_else(|| Error::Contract("fuse needs at least one stream".into()))?;
        if streams.len() == 1 {
            return Ok(first);
        }
        for &s in streams {
            if self.shape(s) != self.shape(first) {
                return Err(shape_err!(
                    "average: stream shapes {:?} and {:?} differ",
                    self.shape(s),
                    self.shape(first)
                ));
            }
        }
        let parts: Vec<&[T]> = streams.iter().map(|&s| self.value(s).data()).collect();
        let out = mean_of(&parts);
        let shape = self.shape(first).to_vec();
        let rg = self.any_grad(streams);
        self.push(Tensor::new(shape, out)?, Op::Average(streams.to_vec()), rg, "average")
    }

    /// `Matmul(x, G)` for a one-hot column matrix `G` (N×K), followed by
    /// averaging the *unique* selected streams.
    ///
    /// The forward value is the plain mean of the distinct chosen streams in
    /// ascending index order, identical to [`Tape::average`] over them. The
    /// backward pass differentiates the matmul form `x·G·d` where column `k`
    /// carries weight `d_k = 1/(|U|·multiplicity_k)`, so gradients reach both
    /// the streams and `G` (and through a straight-through Gumbel sample, the
    /// logits).
    pub fn select_average(&mut self, streams: &[Var], selection: Var) -> Result<Var> {
        let n = streams.len();
        if n < 3 {
            return Err(Error::Contract(format!("selection needs at least 3 streams, got {n}")));
        }
        let (rows, cols) = match self.shape(selection) {
            [r, c] => (*r, *c),
            s => return Err(shape_err!("selection must be a matrix, got {s:?}")),
        };
        if rows != n {
            return Err(shape_err!("selection has {rows} rows for {n} streams"));
        }
        let g = self.value(selection).data();
        let mut choice = Vec::with_capacity(cols);
        for c in 0..cols {
            let mut hit = None;
            for r in 0..rows {
                let v = g[r * cols + c];
                if v == T::one() && hit.is_none() {
                    hit = Some(r);
                } else if v != T::zero() {
                    return Err(Error::Contract(format!("selection column {c} is not one-hot")));
                }
            }
            choice.push(hit.ok_or_else(|| Error::Contract(format!("selection column {c} is empty")))?);
        }
        let mut unique = choice.clone();
        unique.sort_unstable();
        unique.dedup();
        let u = unique.len();
        let column_weights: Vec<T> = choice
            .iter()
            .map(|&r| {
                let mult = choice.iter().filter(|&&q| q == r).count();
                T::one() / T::from_usize(u * mult).unwrap()
            })
            .collect();
        let first = streams[unique[0]];
        for &s in streams {
            if self.shape(s) != self.shape(first) {
                return Err(shape_err!("selection streams must share a shape"));
            }
        }
        let parts: Vec<&[T]> = unique.iter().map(|&i| self.value(streams[i]).data()).collect();
        let out = mean_of(&parts);
        let shape = self.shape(first).to_vec();
        let mut deps = streams.to_vec();
        deps.push(selection);
        let rg = self.any_grad(&deps);
        self.push(
            Tensor::new(shape, out)?,
            Op::SelectAverage {
                streams: streams.to_vec(),
                selection,
                unique,
                column_weights,
            },
            rg,
            "select_average",
        )
    }
}

pub(crate) fn concat_backward<T: Real>(buf: &mut GradBuf<'_, T>, xs: &[Var], g: &[T]) {
    let dims: Vec<_> = xs.iter().map(|&v| buf.value(v).dims4().unwrap()).collect();
    let (b, _, h, w) = dims[0];
    let hw = h * w;
    let total: usize = dims.iter().map(|d| d.1).sum();
    let mut offset = 0;
    for (&v, d) in xs.iter().zip(&dims) {
        let c = d.1;
        if let Some(s) = buf.slot(v) {
            for bi in 0..b {
                let src = &g[(bi * total + offset) * hw..(bi * total + offset + c) * hw];
                let dst = &mut s[bi * c * hw..(bi + 1) * c * hw];
                dst.iter_mut().zip(src).for_each(|(a, x)| *a += *x);
            }
        }
        offset += c;
    }
}

pub(crate) fn average_backward<T: Real>(buf: &mut GradBuf<'_, T>, xs: &[Var], g: &[T]) {
    let k = T::from_usize(xs.len()).unwrap();
    for &v in xs {
        if let Some(s) = buf.slot(v) {
            s.iter_mut().zip(g).for_each(|(a, x)| *a += *x / k);
        }
    }
}

pub(crate) fn select_average_backward<T: Real>(
    buf: &mut GradBuf<'_, T>,
    streams: &[Var],
    selection: Var,
    unique: &[usize],
    column_weights: &[T],
    g: &[T],
) {
    let k = T::from_usize(unique.len()).unwrap();
    for &i in unique {
        if let Some(s) = buf.slot(streams[i]) {
            s.iter_mut().zip(g).for_each(|(a, x)| *a += *x / k);
        }
    }
    if buf.wants(selection) {
        let cols = column_weights.len();
        let dots: Vec<T> = streams
            .iter()
            .map(|&v| buf.value(v).data().iter().zip(g).map(|(&a, &b)| a * b).sum())
            .collect();
        let s = buf.slot(selection).unwrap();
        for (r, dot) in dots.iter().enumerate() {
            for (c, &wc) in column_weights.iter().enumerate() {
                s[r * cols + c] += *dot * wc;
            }
        }
    }
}
