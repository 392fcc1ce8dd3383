//! Global map representation learning for vectorized map decoders.

pub mod decoder;
pub mod error;
pub mod eval;
pub mod grg;
pub mod grl;
pub mod harness;
pub mod mapcore;
pub mod ndgrad;
pub mod raster;

pub use error::{Error, Result};
