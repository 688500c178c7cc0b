//! Lymphocyte detection and instance segmentation with channel-boosted
//! hybrid vision transformer backbones.

pub mod ctx;
pub mod data;
pub mod error;
pub mod exploitation;
pub mod generators;
pub mod gradcheck_suite;
pub mod harness;
pub mod heads;
pub mod merging;
pub mod metrics;
pub mod region;

pub use ctx::{Ctx, Probe};
pub use error::{Error, Result};
pub use region::BBox;
