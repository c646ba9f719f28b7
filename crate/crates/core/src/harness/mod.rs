//! Synthetic experiments: data, missing-modality protocol, training,
//! per-subset evaluation and paired statistics.

pub mod data;
pub mod eval;
pub mod masks;
pub mod optim;
pub mod rng;
pub mod stats;
pub mod train;
