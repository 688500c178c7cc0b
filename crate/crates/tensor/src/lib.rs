//! Dense `f64` tensors with reverse-mode automatic differentiation, the
//! layers built on them, parameter storage, checkpoints and optimizers.

pub mod array;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod param;
pub mod tensor;

pub use array::Array;
pub use error::{Error, Result};
pub use param::{Builder, Init, Param, ParamId, ParamKind, ParamStore};
pub use tensor::{Gradients, Tensor};
