//! Minimal reverse-mode automatic differentiation.
//!
//! Just enough machinery to run the mixture-of-experts forward pass and
//! backpropagate the relaxed transport loss: dense `f64` tensors, a
//! recording tape with a fixed op set, and finite-difference checking.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_params};
pub use tape::{
    ce_cost, kl_divergence, kl_divergence_grad_u, soft_iou_cost, softmax_values, Gradients,
    ParamId, ParamSet, Tape, ValueRef, IOU_EPS, LOG_CLAMP,
};
pub use tensor::Tensor;
