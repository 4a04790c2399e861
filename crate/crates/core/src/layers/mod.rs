//! Differentiable layers with explicit forward tapes and exact backward passes.
//!
//! Every `forward` returns its output together with whatever the matching
//! `backward` needs; tapes are per-call values, so the layers themselves stay
//! immutable during a pass.

mod loss;
mod qrelu;
mod simple;
mod transform;

pub use loss::softmax_xent;
pub use qrelu::{QReluForm, QReluLayer, QReluGrads, QReluTape};
pub use simple::{
    dropout_backward, dropout_forward, global_avg_pool, global_avg_pool_backward, relu_backward,
    relu_forward, DropoutMask,
};
pub use transform::{TransformForm, TransformGrads, TransformLayer};

/// Training or evaluation behaviour (dropout only).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
