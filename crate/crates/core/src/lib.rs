//! Numerical laboratory for linear transport equations with Brownian
//! forcing of the characteristics.

// Negated comparisons deliberately treat NaN as invalid; index loops mirror
// the component notation of the numerics.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod blowup;
pub mod brownian;
pub mod cli;
pub mod error;
pub mod fields;
pub mod flow;
pub mod grid;
pub mod linalg;
pub mod quadrature;
pub mod report;
pub mod stats;
pub mod transport;
pub mod zvonkin;

pub use error::{Error, Result};
