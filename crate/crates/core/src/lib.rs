//! Deep transform and metric learning.
//!
//! A dictionary-learning layer `x ↦ argmin_a ½‖x − Da‖² + λψ(a) + (α/2)‖a‖² + dᵀa`
//! splits into an affine transform `z = Fx − c` followed by a proximity operator
//! computed in the metric induced by `Q = DᵀD + αI`. This crate builds both halves:
//!
//! - [`tensor`]: dense tensors, convolution, deterministic random numbers.
//! - [`dict`]: the synthesis-dictionary view and its equivalence with the transform view.
//! - [`qmetric`]: three solvers for the Q-metric proximity operator plus fixed-point checks.
//! - [`layers`]: differentiable transform, Q-metric ReLU (unrolled), dropout, pooling, loss.
//! - [`network`]: declarative PlainNet / ResNet builders and the runtime model.
//! - [`train`]: projected SGD with momentum, schedules, checkpoints.
//! - [`gradcheck`]: central finite-difference oracles.
//!
//! Every verification path runs in `f64`.

pub mod dict;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod oracle;
pub mod par;
pub mod qmetric;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
