//! Class-incremental learning lab: a miniature vision transformer with
//! incremental parallel adapters, decoupled anchor supervision, and a
//! non-rehearsal benchmark harness.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod ipa;
pub mod metrics;
pub mod optim;
pub mod param;
pub mod rng;
pub mod supervision;
pub mod tensor;

pub use error::{CheckpointError, DrlError, Result};
pub use tensor::Tensor;
