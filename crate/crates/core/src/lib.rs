pub mod cli;
pub mod error;
pub mod eval;
pub mod model;
pub mod schedule;
pub mod search;
pub mod tasks;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
