//! Label-free mixed-precision post-training quantization under a memory budget.
//!
//! The pipeline: observe layer outputs on unlabeled data, rank layers by
//! sensitivity, assign per-layer bit-widths that fit a size budget, calibrate
//! activation quantizers, and evaluate the quantized model against its
//! floating-point reference.

pub mod calib;
pub mod error;
pub mod flops;
pub mod harness;
pub mod model;
pub mod ops;
pub mod quant;
pub mod sensitivity;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{build_toy_encoder, EncoderConfig, ModelGraph};
pub use tensor::{DType, Tensor};
