//! LLaMA-style transformer: weights, activation taps, quantization
//! configuration, and float / fake-quant forward passes.

pub mod config;
pub mod forward;
pub mod pretrain;
pub mod qconfig;
pub mod taps;
pub mod weights;

pub use config::{Activation, MassiveChannel, ModelConfig};
pub use forward::{
    argmax, forward_fakequant, generate_greedy_fakequant, nll_sum, EVAL_WINDOW, forward_float, forward_graph, perplexity_fakequant, perplexity_float,
    perplexity_with, BlockVars, ModelVars, NoQuant, QuantHook,
};
pub use pretrain::{pretrain, PretrainConfig, PretrainReport};
pub use qconfig::{QConfig, QuantParams, SchemeName};
pub use taps::{linear_list, tap_list, Linear, LinearKind, Tap, TapKind};
pub use weights::{Block, Model};
