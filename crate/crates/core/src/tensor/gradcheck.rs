//! Central finite-difference verification of tape gradients.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest relative deviation between analytic and numeric gradients of a
/// scalar function of one input tensor.
///
/// The per-coordinate error is `|analytic − numeric| / max(1, |numeric|)`
/// with `numeric` the central difference at step `eps`.
pub fn grad_check<F>(f: F, input: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), true)?;
    let y = f(&mut tape, x)?;
    tape.backward_leaves(y)?;
    let analytic = match tape.grad(x) {
        Some(g) => g.clone(),
        None => Tensor::zeros_like(input),
    };
    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.leaf(probe, false)?;
        let y = f(&mut t, x)?;
        scalar_value(&t, y)
    };
    let mut worst = 0.0f64;
    for i in 0..input.numel() {
        let mut plus = input.clone();
        plus.data_mut()[i] += eps;
        let mut minus = input.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same check over every coordinate of every parameter in `store`.
///
/// `f` builds the scalar loss on a fresh tape from the current store. The
/// store's gradients are reset first and left holding the analytic result.
pub fn grad_check_params<F>(store: &mut ParamStore<f64>, eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let y = f(&mut tape, store)?;
    tape.backward(y, store)?;
    let analytic: Vec<Tensor<f64>> = store.iter().map(|(_, p)| p.grad.clone()).collect();
    let ids: Vec<_> = store.ids().collect();
    let mut worst = 0.0f64;
    for (pi, id) in ids.into_iter().enumerate() {
        for i in 0..store.value(id).numel() {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + eps;
            let up = {
                let mut t = Tape::new();
                let y = f(&mut t, store)?;
                scalar_value(&t, y)?
            };
            store.get_mut(id).value.data_mut()[i] = orig - eps;
            let down = {
                let mut t = Tape::new();
                let y = f(&mut t, store)?;
                scalar_value(&t, y)?
            };
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[pi].data()[i], numeric));
        }
    }
    Ok(worst)
}

fn scalar_value(tape: &Tape<f64>, y: Var) -> Result<f64> {
    let v = tape.value(y);
    if !v.is_scalar() {
        return Err(Error::Contract(format!("gradient check needs a scalar function, got {:?}", v.shape())));
    }
    let s = v.item();
    if !s.is_finite() {
        return Err(Error::Numeric("non-finite value during finite differencing".into()));
    }
    Ok(s)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}
