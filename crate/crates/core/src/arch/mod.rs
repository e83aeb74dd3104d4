//! Compilation of recurrent encoder-decoder topologies into unrolled,
//! weight-shared networks.

mod config;
mod network;
mod plan;
mod topology;

pub use config::{ArchConfig, Family, UpsampleMode};
pub use network::{Forward, Network, RunOptions};
pub use plan::{deps, ConvKey, ConvSpec, Instr, NormKey, Op, Plan, Role, Site};
pub use topology::{Direction, SkipEdge, Topology};
