//! Dense arrays, counter-based RNG and the reverse-mode tape.

mod ops;
mod rng;
mod tape;
mod tensor;

pub use ops::{bilinear_resize, dot, finite_diff_grad, l2_normalize, matmul, softmax};
pub use rng::{RngState, RngStream};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
