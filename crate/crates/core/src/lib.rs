//! Bit-exact minifloat quantization, quantization-aware training with
//! learned per-layer exponent biases, and golden models of the minifloat
//! multiplier and hybrid MAC datapath.
//!
//! Minifloat formats `EeMm` have a sign bit, `e` exponent bits and `m`
//! mantissa bits, no NaN, infinity or subnormals, and an integer exponent
//! bias chosen per tensor. See [`format`] and [`quant`] for the number
//! system, [`qat`] and [`train`] for training, and [`hw`] for the
//! hardware models.

pub mod autograd;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod format;
pub mod graph;
pub mod hw;
pub mod loss;
pub mod models;
pub mod ops;
pub mod optim;
pub mod qat;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use format::{Codeword, MinifloatFormat, QuantRange, ZeroEncoding};
pub use quant::{quantize, quantize_backward, BiasInit, QuantizerState, SteMode};
pub use tensor::Tensor;
