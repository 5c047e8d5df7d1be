#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod engine;
mod error;
pub mod eval;
pub mod geom;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
