//! Composition of frozen transformer language models through trainable
//! cross-attention bridges.

pub mod calm;
pub mod checkpoint;
pub mod error;
pub mod lm;
pub mod lora;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
