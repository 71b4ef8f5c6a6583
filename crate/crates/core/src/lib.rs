pub mod data;
pub mod dfm;
pub mod diff;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod prompt;
pub mod space;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
