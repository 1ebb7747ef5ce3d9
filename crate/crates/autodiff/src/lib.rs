//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod error;
mod gradcheck;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, relative_error, GradCheckConfig};
pub use tape::{conv_out_len, BatchNormMode, BatchStats, Gradients, Tape, Var, LOG_FLOOR};
pub use tensor::Tensor;
