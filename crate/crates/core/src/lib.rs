pub mod capsule;
pub mod diagnostics;
pub mod evaluation;
pub mod gait_data;
mod error;
pub mod model;
pub mod pfe;
pub mod recurrent;
pub mod tensor_core;
pub mod training;

pub use error::{Error, Result};
pub use model::ModelParams;
pub use tensor_core::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/silhouettes.md")]
    mod silhouettes {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/context.md")]
    mod context {}
    #[doc = include_str!("../../../book/src/capsules.md")]
    mod capsules {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
