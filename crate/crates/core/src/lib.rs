//! Cascade attribute classification at desk scale.

pub mod config;
pub mod diagnostics;
pub mod distill;
pub mod error;
pub mod frl;
pub mod imageio;
pub mod netspec;
pub mod paw;
pub mod region;
pub mod synthgen;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use region::RegionBox;
