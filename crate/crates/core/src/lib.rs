//! Cumulative restricted Boltzmann machines for ordinal data.
//!
//! Vector models treat each instance as a vector of ordinal variables tied
//! by binary factors; matrix models add item-side factors so that both rows
//! and columns of a rating matrix carry latent structure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod inference;
pub mod io;
pub mod learning;
pub mod matrix;
pub mod model;
pub mod par;
pub mod predict;
pub mod rng;
pub mod synthetic;
pub mod truncnorm;

pub use error::{CrbmError, Result};
