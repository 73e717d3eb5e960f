mod binio;
pub mod bitmap;
pub mod data;
pub mod distill;
pub mod error;
pub mod exec;
pub mod model;
mod par;
pub mod sparsity;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatError, Result};
