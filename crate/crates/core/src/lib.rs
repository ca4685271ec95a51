pub mod augment;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod pooling;
pub mod tensor;

pub use error::{CsgError, Result};
pub use tensor::{Graph, Tensor, Var};
