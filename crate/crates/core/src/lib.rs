// `!(x > 0.0)` is used on purpose throughout so that NaN inputs are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bounds;
pub mod cli;
pub mod clock;
pub mod error;
pub mod estimation;
pub mod noise;
pub mod optimizer;
pub mod prior;
pub mod protocol;
pub mod spin;

pub use error::{Error, Result};
