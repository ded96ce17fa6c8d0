//! Tensor kernels without autodiff bookkeeping.

pub mod conv;
pub mod elementwise;
pub mod norm;
pub mod pool;
