pub mod discovery;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod masking;
pub mod mixing;
pub mod nn;
pub mod scm;
pub mod train;

pub use error::{Error, Result};
