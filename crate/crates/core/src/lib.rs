mod error;
pub mod attacks;
pub mod cli;
pub mod data;
pub mod eval;
pub mod io;
pub mod model;
pub mod numerics;
pub mod soup;
pub mod train;

pub use error::{Error, Result};
