// Config checks use `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod datasim;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod nn;
pub mod separator;
pub mod training;
pub mod visual;

pub use error::{Error, Result};
