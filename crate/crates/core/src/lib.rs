pub mod bd2a;
pub mod cli;
pub mod config;
pub mod biasgen;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod io;
pub mod klotski;
pub mod pipeline;
pub mod scorer;
pub mod selector;
pub mod tiler;

pub use error::{Error, ErrorKind, Result};
