//! Integer-only execution of a calibrated model.
//!
//! Linear layers, attention products, residual additions and the gating
//! product run on integer codes with 32-bit accumulators and fixed-point
//! requantization. Normalization, rotary embedding, softmax and the MLP
//! nonlinearity are float islands: they dequantize their input codes,
//! compute with the kernels the fake-quant graph uses, and quantize again.

mod compile;
mod cost;
mod exec;
mod io;
mod requant;

pub use compile::{compile, compile_fused, ActQuant, QBlock, QLinear, QuantizedModel};
pub use cost::{cost_report, CostMode, CostReport, LayerCost};
pub use exec::{
    generate_greedy, int_forward, int_linear, perplexity_int, IntOutput, Instrument, Region, Session,
};
pub use io::{load_quantized, quantized_from_file, quantized_model_file, save_quantized, QUANTIZED_KIND};
pub use requant::{apply_sum, shift_round, FixedPointRequant};
