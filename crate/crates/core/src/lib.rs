// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod heads;
pub mod ldwa;
pub mod metrics;
pub mod model;
pub mod params;
pub mod profiler;
pub mod train;
pub mod visualize;

pub use error::{Error, Result};
