//! Neural-network operators recorded on the tape.

pub mod conv;
pub mod fuse;
pub mod init;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod resize;

pub use conv::ConvParams;
pub use fuse::FusionMode;
pub use norm::{BatchNormState, RunningStats};

#[cfg(test)]
mod tests;
