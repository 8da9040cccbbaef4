pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{DenseTensor, SparseRowMatrix};
