//! Reservoir computing benchmark: topology construction, Mackey-Glass
//! forecasting, and information processing capacity.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod ipc;
pub mod linalg;
pub mod mackey_glass;
pub mod metrics;
pub mod reservoir;
pub mod topology;

pub use error::{Error, Result};
