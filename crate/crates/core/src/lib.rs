//! Cross-lingual natural language inference with a siamese sentence encoder.

#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod head;
pub mod ops;
pub mod optim;
pub mod par;
pub mod persist;
pub mod tensor;
pub mod train;
pub mod translate;

pub use error::{Error, Result};
