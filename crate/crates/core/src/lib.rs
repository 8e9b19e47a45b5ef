// validation uses negated comparisons so NaN is rejected along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attacks;
pub mod ctoy;
pub mod defense;
pub mod error;
pub mod exec;
pub mod image;
pub mod nn;
pub mod retinotopic;
pub mod objective;
pub mod rng;
pub mod schedule;
pub mod scm;
pub mod tensor;

pub use error::{Error, Result};
