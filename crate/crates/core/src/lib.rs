pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod darken;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod exposure;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
