//! Phase-shifting fringe profilometry with a cylindrical slot projector.
// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calib;
pub mod cli;
pub mod error;
pub mod geomfit;
pub mod io;
pub mod metrology;
pub mod phase;
pub mod pipeline;
pub mod raster;
pub mod sim;
pub mod unwrap;

pub use error::{Error, Result};
