//! Core algorithms for exemplar-free evolving-world object detection.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapters;
pub mod error;
pub mod heads;
pub mod linalg;
pub mod metrics;
pub mod protocol;
pub mod rng;
pub mod simulator;
pub mod tape;

pub use error::{Error, Result};
pub use linalg::Matrix;
