//! Recurrent bi-directional encoder-decoder segmentation networks.
//!
//! The crate covers the full stack: a small dense-tensor kernel with
//! reverse-mode differentiation ([`tensor`]), the convolutional operators
//! ([`nn`]), compilation of recurrent topologies into unrolled weight-shared
//! graphs ([`arch`]), exact parameter/MAC accounting ([`cost`]), the two
//! search phases over skip connections ([`nas`]), synthetic segmentation
//! data ([`data`]) and the training loop ([`train`]).

pub mod arch;
pub mod cost;
pub mod data;
pub mod error;
pub mod nas;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
