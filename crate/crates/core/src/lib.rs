//! Test-time block pruning for residual networks: rank blocks by the
//! output damage their removal causes per unit of latency saved, skip the
//! worst-value blocks, then recover accuracy by distilling the pruned
//! student against cached teacher features.

pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod latency;
pub mod meter;
pub mod network;
pub mod pruning;
pub mod scheduler;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use network::{Architecture, ResidualNetwork, SkipSet};
pub use tensor::Tensor;
