//! Reverse-mode differentiation over [`Tensor`](crate::tensor::Tensor)s.
//!
//! A [`Tape`] is built fresh for each forward pass. Parameters enter as
//! leaves, operations append records, and [`Tape::backward`] walks the
//! records in reverse once. Convolution is cross-correlation (no kernel
//! flip) over row-major `[N, C, H, W]` data.

pub mod kernels;
mod tape;

pub use tape::{update_running_stats, BnMode, Tape, Var, BN_EPS, BN_MOMENTUM};
