#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Differentiable modular forward model for single-receiver acoustic source
//! localization in a shallow isovelocity waveguide, with gradient-based and
//! domain-adaptive localization.

pub mod diff;
pub mod error;
pub mod forward;
pub mod harness;
pub mod localize;
pub mod optim;
pub mod oracle;
pub mod pln;
pub mod signal;
pub mod theory;

pub use error::{Error, Result};
