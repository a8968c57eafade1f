pub mod data;
pub mod error;
pub mod experiments;
pub mod features;
pub mod fl;
pub mod losses;
pub mod nn;
pub mod partition;
pub mod plots;
pub mod rng;

pub use error::{Error, Result};
