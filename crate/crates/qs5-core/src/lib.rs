//! Quantized S5: a state-space sequence model under configurable
//! symmetric per-tensor quantization, with quantization-aware training,
//! post-training quantization, quantization-aware fine-tuning, and a
//! Mackey-Glass dynamical-system evaluation harness.

pub mod dynsys;
pub mod error;
pub mod intpath;
pub mod model;
pub mod qops;
pub mod quant;
pub mod serialize;
pub mod ssm;
pub mod tasks;
pub mod train;

pub use error::{QssmError, Result};
pub use model::{ModelBundle, QuantConfig, TaskKind};
pub use quant::{QComplexTensor, QTensor};
pub use ssm::{DiscreteS5, S5Params};
