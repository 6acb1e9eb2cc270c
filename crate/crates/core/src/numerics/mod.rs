//! Dense tensors, a reverse-mode tape and the AdamW optimizer.

mod optim;
mod tape;
mod tensor;

pub use optim::{AdamWConfig, OptimizerState};
pub use tape::{matmul, softmax, Gradients, Tape, Var, GATHER_ZERO};
pub use tensor::{gemm, Mask, Real, Tensor, View};
