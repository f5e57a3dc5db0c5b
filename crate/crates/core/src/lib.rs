pub mod cli;
pub mod dataio;
pub mod error;
pub mod evidence;
pub mod lssvm;
pub mod metrics;
pub mod selection;
pub mod spectral;

pub use error::{Error, Result};
