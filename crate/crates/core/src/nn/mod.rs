//! Transformer foundation model with per-environment output heads.

pub mod checkpoint;
pub mod model;
pub mod tape;

#[cfg(test)]
mod grad_tests;

pub use model::{
    extractor_graph, flatten_channels, forward, forward_batch, head_graph, pooled_features,
    token_features, tokenize, FeatureExtractor, HeadVars, Linear, Mode, ModelHyper, ModelOutput,
    OutputHead, Parameters, RateRequest, Tokens,
};
pub use tape::{sigmoid, threshold, Gradients, Tape, Tensor, Var};
