//! Dense `f64` tensors with hand-written forward and backward passes for the
//! operations the model uses, an Adam optimizer and a finite-difference
//! gradient checker.
//!
//! Operations are plain functions over [`Tensor`]s. [`tape::Tape`] records
//! compositions of them so that whole blocks can be differentiated.

pub mod activation;
pub mod adam;
pub mod conv;
pub mod dense;
pub mod gradcheck;
pub mod pool;
pub mod softmax;
pub mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use conv::{conv2d, conv2d_backward};
pub use dense::{linear, linear_backward, matmul, LinearGrads};
pub use gradcheck::{finite_diff_check, Differentiable, FnOp, GradCheckReport};
pub use pool::{max_pool2d, max_pool2d_backward};
pub use softmax::{cross_entropy, cross_entropy_backward, softmax, softmax_backward};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Parameter path paired with its value and gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradRecord {
    pub path: String,
    pub value: Tensor,
    pub gradient: Tensor,
}

impl GradRecord {
    pub fn new(path: impl Into<String>, value: Tensor, gradient: Tensor) -> crate::Result<Self> {
        if value.shape() != gradient.shape() {
            return Err(crate::Error::shape(
                "grad_record",
                format!("value {:?} vs gradient {:?}", value.shape(), gradient.shape()),
            ));
        }
        Ok(GradRecord {
            path: path.into(),
            value,
            gradient,
        })
    }
}
