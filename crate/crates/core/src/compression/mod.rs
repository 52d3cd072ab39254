//! Post-training pruning, 8-bit fixed-point quantization and the integer
//! inference engine.

mod engine;
mod fixed;
mod prune;
mod quantize;

pub use engine::{quantized_forward, ActivationTable, QuantEngine, TableFunction, TABLE_DOMAIN, TABLE_SIZE};
pub use fixed::{dequantize, quantize_value, saturate_i8, shift_round_even, FixedPointFormat};
pub use prune::{prune_count, prune_global_magnitude, weight_sparsity, PruneReport};
pub use quantize::{
    decode_quantized, encode_quantized, load_quantized, quantize_params, save_quantized, QuantizedParameters,
};

use crate::nn::model_size_kb;

/// Ratio of the reported (two-decimal) model sizes in KB.
pub fn compression_ratio(count_teacher: usize, count_student: usize) -> f64 {
    model_size_kb(count_teacher) / model_size_kb(count_student)
}
