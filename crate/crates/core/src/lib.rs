//! Open-set domain-adaptive segmentation at desk scale: a synthetic
//! two-domain benchmark, Euler-margin attention, a Sinkhorn-based graph
//! matching adapter, a toy encoder-decoder with teacher-student
//! self-training, and the open-set metric protocol.

pub mod error;
pub mod euler;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod train;
pub mod tape;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
