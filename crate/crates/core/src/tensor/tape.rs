//! Recording tape for reverse-mode automatic differentiation.
//!
//! Every operator evaluates eagerly, stores its result in a node and
//! records what its backward rule needs. Nodes are appended in evaluation
//! order, so the node list is already a topological order and `backward`
//! simply walks it in reverse, visiting each node once.

use std::collections::HashMap;

use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation plus whatever its backward rule needs beyond the
/// operand values.
pub(crate) enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Mean(Var),
    Reshape(Var),
    MatMul(Var, Var),
    GumbelSoftmax {
        logits: Var,
        soft: Vec<T>,
        rows: usize,
        cols: usize,
        temperature: T,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Resize {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Concat(Vec<Var>),
    Average(Vec<Var>),
    SelectAverage {
        streams: Vec<Var>,
        selection: Var,
        unique: Vec<usize>,
        column_weights: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<u32>,
    },
}

pub(crate) struct Node<T: Real> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Lazily allocated gradient buffers, one per node.
pub(crate) struct GradBuf<'a, T: Real> {
    nodes: &'a [Node<T>],
    grads: Vec<Option<Vec<T>>>,
}

impl<'a, T: Real> GradBuf<'a, T> {
    /// Mutable gradient slot of `v`, or `None` when `v` needs no gradient.
    pub fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
    }

    pub fn value(&self, v: Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

/// Single-writer record of one forward evaluation.
pub struct Tape<T: Real = f64> {
    pub(crate) nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    leaf_grads: HashMap<Var, Tensor<T>>,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            leaf_grads: HashMap::new(),
            check_finite: true,
        }
    }

    /// Disables the per-operator finiteness scan.
    pub fn without_finite_checks(mut self) -> Self {
        self.check_finite = false;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated into a leaf created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(&v)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &str) -> Result<Var> {
        if self.check_finite {
            value.ensure_finite(name)?;
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same
    /// node so weight sharing accumulates naturally.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err!("{name}: operand shapes {:?} and {:?} differ", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |p, q| p + q)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |p, q| p - q)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |p, q| p * q)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, factor), rg, "scale")
    }

    /// Rectifier; the subgradient at exactly zero is taken as zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Relu(a), rg, "relu")
    }

    /// Mean over every element, producing a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).mean());
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Mean(a), rg, "mean")
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Reshape(a), rg, "reshape")
    }

    /// Matrix product of an m×k and a k×n operand.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, k2, n) = match (sa, sb) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => return Err(shape_err!("matmul expects 2-D operands, got {sa:?} and {sb:?}")),
        };
        if k != k2 {
            return Err(shape_err!("matmul inner extents differ: {sa:?} · {sb:?}"));
        }
        let mut out = vec![T::zero(); m * n];
        super::real::matmul_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out, true);
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// Accumulates d`loss`/d(leaf) into leaves and d`loss`/d(param) into
    /// `store`. Calling it twice without resetting doubles the gradients.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward_impl(loss, Some(store))
    }

    /// Backward pass for tapes that reference no stored parameters.
    pub fn backward_leaves(&mut self, loss: Var) -> Result<()> {
        self.backward_impl(loss, None)
    }

    fn backward_impl(&mut self, loss: Var, mut store: Option<&mut ParamStore<T>>) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not recorded on this tape".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut buf = GradBuf {
            nodes: &self.nodes,
            grads: vec![None; self.nodes.len()],
        };
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        buf.grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_updates: Vec<(Var, Vec<T>)> = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = buf.grads[i].take() else { continue };
            let nodes = buf.nodes;
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => leaf_updates.push((Var(i), g)),
                Op::Param(id) => match store.as_deref_mut() {
                    Some(s) => {
                        let dst = s.get_mut(*id).grad.data_mut();
                        for (d, v) in dst.iter_mut().zip(&g) {
                            *d += *v;
                        }
                    }
                    None => {
                        return Err(Error::Contract(
                            "tape references parameters but no parameter store was given".into(),
                        ))
                    }
                },
                Op::Add(a, b) => {
                    accumulate(&mut buf, *a, &g);
                    accumulate(&mut buf, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut buf, *a, &g);
                    if let Some(s) = buf.slot(*b) {
                        s.iter_mut().zip(&g).for_each(|(d, v)| *d -= *v);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(s) = buf.slot(*a) {
                        for ((d, gv), y) in s.iter_mut().zip(&g).zip(vb) {
                            *d += *gv * *y;
                        }
                    }
                    if let Some(s) = buf.slot(*b) {
                        for ((d, gv), x) in s.iter_mut().zip(&g).zip(va) {
                            *d += *gv * *x;
                        }
                    }
                }
                Op::Scale(a, f) => {
                    if let Some(s) = buf.slot(*a) {
                        s.iter_mut().zip(&g).for_each(|(d, v)| *d += *v * *f);
                    }
                }
                Op::Relu(a) => {
                    if let Some(s) = buf.slot(*a) {
                        for ((d, gv), y) in s.iter_mut().zip(&g).zip(node.value.data()) {
                            if *y > T::zero() {
                                *d += *gv;
                            }
                        }
                    }
                }
                Op::Mean(a) => {
                    let n = T::from_usize(nodes[a.0].value.numel()).unwrap();
                    let share = g[0] / n;
                    if let Some(s) = buf.slot(*a) {
                        s.iter_mut().for_each(|d| *d += share);
                    }
                }
                Op::Reshape(a) => accumulate(&mut buf, *a, &g),
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    let n = nodes[b.0].value.shape()[1];
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(s) = buf.slot(*a) {
                        super::real::matmul_nt(m, n, k, &g, vb, s, false);
                    }
                    if let Some(s) = buf.slot(*b) {
                        super::real::matmul_tn(k, m, n, va, &g, s, false);
                    }
                }
                Op::GumbelSoftmax {
                    logits,
                    soft,
                    rows,
                    cols,
                    temperature,
                } => super::gumbel::backward(&mut buf, *logits, soft, *rows, *cols, *temperature, &g),
                Op::Conv2d { x, w, b, stride, pad } => {
                    crate::nn::conv::conv2d_backward(&mut buf, *x, *w, *b, *stride, *pad, &node.value, &g)
                }
                Op::ConvTranspose2d { x, w, b, stride } => {
                    crate::nn::conv::conv_transpose2d_backward(&mut buf, *x, *w, *b, *stride, &node.value, &g)
                }
                Op::MaxPool { x, argmax } => crate::nn::pool::max_pool_backward(&mut buf, *x, argmax, &g),
                Op::Resize { x } => crate::nn::resize::resize_backward(&mut buf, *x, &node.value, &g),
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => crate::nn::norm::batch_norm_backward(
                    &mut buf,
                    *x,
                    *gamma,
                    *beta,
                    xhat,
                    inv_std,
                    *batch_stats,
                    &node.value,
                    &g,
                ),
                Op::Concat(xs) => crate::nn::fuse::concat_backward(&mut buf, xs, &g),
                Op::Average(xs) => crate::nn::fuse::average_backward(&mut buf, xs, &g),
                Op::SelectAverage {
                    streams,
                    selection,
                    unique,
                    column_weights,
                } => crate::nn::fuse::select_average_backward(&mut buf, streams, *selection, unique, column_weights, &g),
                Op::CrossEntropy { logits, probs, targets } => {
                    crate::nn::loss::cross_entropy_backward(&mut buf, *logits, probs, targets, &node.value, &g)
                }
            }
        }
        for (v, g) in leaf_updates {
            let shape = self.nodes[v.0].value.shape().to_vec();
            match self.leaf_grads.get_mut(&v) {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(d, x)| *d += *x),
                None => {
                    self.leaf_grads.insert(v, Tensor::new(shape, g)?);
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn accumulate<T: Real>(buf: &mut GradBuf<'_, T>, v: Var, g: &[T]) {
    if let Some(s) = buf.slot(v) {
        s.iter_mut().zip(g).for_each(|(d, x)| *d += *x);
    }
}
