//! Dense double-precision linear algebra with a per-pass gradient tape.

pub mod cca;
mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_coords, relative_error};
pub use tape::{GradTape, Gradients, Segments, Var};
pub use tensor::{layer_norm, leaky_relu, matmul, softmax_rows, Tensor2};
