pub mod corruption;
pub mod error;
pub mod flops;
pub mod io;
pub mod models;
pub mod nn;
pub mod probes;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
