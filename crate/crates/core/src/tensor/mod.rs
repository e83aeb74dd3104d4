//! Dense tensors and the reverse-mode differentiation tape.

mod array;
pub mod gradcheck;
pub mod gumbel;
mod param;
mod real;
pub(crate) mod tape;

pub use array::Tensor;
pub use gradcheck::{grad_check, grad_check_params};
pub use gumbel::{sample_gumbel, GumbelOptions};
pub use param::{Param, ParamId, ParamStore};
pub use real::Real;
pub(crate) use real::{matmul_nn, matmul_nt, matmul_tn};
pub use tape::{Tape, Var};
