//! Attention-free autoregressive language model built from a MaxSim split
//! ranker and a neural processor (enricher, gated dynamic contextualizer,
//! fuser), with training, synthetic long-context tasks and instrumentation.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod instrument;
pub mod model;
pub mod numerics;
pub mod ranker;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParams};
pub use numerics::{Scalar, Tape, Tensor, Var};

pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ModelParams32 = ModelParams<f32>;
pub type ModelParams64 = ModelParams<f64>;
