//! Differentiable operations, implemented as methods on [`Tensor`](crate::Tensor).

mod conv;
mod elementwise;
mod linalg;
mod norm;
pub(crate) mod reduce;
mod sample;
mod shape;

pub use elementwise::sigmoid;
pub use norm::{BatchMoments, NormStats};
pub use sample::{bilinear_sample, resize_source_coord, Stencil};
