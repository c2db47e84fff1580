#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod importance;
pub mod model;
pub mod ortho;
pub mod pruning;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
