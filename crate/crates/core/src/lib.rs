//! Prescribed-time boundary stabilization of `v_t = theta v_xx + lambda(x, t) v`
//! with time-varying backstepping, plus deep-operator surrogates for the gain
//! kernel and for the whole feedback law.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::needless_range_loop)]

pub mod analysis;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod io;
pub mod kernel;
pub mod operator;
pub mod plant;
pub mod transform;

pub use error::{Error, Result};
