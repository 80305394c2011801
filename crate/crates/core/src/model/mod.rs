//! The neural processor and the full model built around the ranker.

mod config;
mod forward;
mod infer;
mod params;


pub use config::{Ablations, Activation, ModelConfig};
pub use forward::{
    causal_mask, contextualize, enrich, forward_train, fuse, layer_forward, TrainForward,
};
pub use infer::{forward_infer, generate, greedy, Generator, InferForward};
pub use params::{LayerParams, LayerVars, ModelParams, ParamVars};
