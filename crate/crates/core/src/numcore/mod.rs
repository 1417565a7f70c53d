//! Dense numeric kernel: matrices, deterministic RNG, and hand-written
//! forward/backward pairs.

mod matrix;
pub mod ops;
mod rng;

pub use matrix::Matrix;
pub use ops::{
    clip_and_step, cross_entropy_total, dropout, dropout_mask, embedding_backward,
    embedding_lookup, gemm, matmul, matmul_backward, matmul_t, mse, sigmoid, sigmoid_backward,
    sigmoid_scalar, softmax_cross_entropy, softmax_rows, tanh, tanh_backward, CompensatedSum,
    CrossEntropy, DropoutMask, Mode, StepStats, Transpose,
};
pub use rng::Rng;
