//! Dense vectors and matrices, activations, losses, a small MLP with a
//! hand-written backward pass, and SGD/Adam.

mod loss;
mod matrix;
mod mlp;
mod optim;

pub use loss::{kl_divergence, mse, mse_grad, softmax};
pub use matrix::{axpy, dot, l2_norm, Matrix};
pub use mlp::{Activation, ActivationCache, Grads, Layer, MlpParams};
pub use optim::{OptimizerKind, OptimizerState};
