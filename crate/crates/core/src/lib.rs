// Negated comparisons deliberately reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod baselines;
pub mod channelgen;
mod codec;
pub mod error;
pub mod evalbench;
pub mod nn;
pub mod phy;
pub mod training;

pub use error::{Error, Result};
