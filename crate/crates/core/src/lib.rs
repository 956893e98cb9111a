#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod data;
pub mod error;
pub mod loss;
pub mod network;
pub mod norm;
pub mod postprocess;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Init, Scalar, Tape, Tensor, Var};
