//! Long-context finetuning of a 4-bit quantized decoder with low-rank
//! adapters: interpolated rotary positions, grouped shifted attention,
//! NF4 storage, training and perplexity evaluation.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod lora;
pub mod model;
pub mod positional;
pub mod quantizer;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
