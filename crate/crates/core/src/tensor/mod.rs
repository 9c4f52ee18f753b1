//! Dense 2-D arrays with reverse-mode automatic differentiation.

pub mod checkpoint;
mod gradcheck;
mod kernels;
mod params;
mod tape;

pub use gradcheck::{grad_check, GRAD_FLOOR, grad_check_filtered, GradCheckReport};
pub use params::{clip_grad_norm, sgd_step, Param, ParamStore};
pub use tape::{
    bce_with_logits_scalar, leaky_relu, sigmoid, softmax_rows, Activation, Gradients, Tape, Var,
};
