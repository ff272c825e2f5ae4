//! Dense tensors, a reverse-mode tape and first-order optimizers.

mod optim;
mod tape;
mod tensor;

pub use optim::{collect_grads, sgd_step, Adam, Param};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
