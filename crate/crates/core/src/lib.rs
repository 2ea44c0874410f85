pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod sampling;
pub mod seed;
pub mod structure;
pub mod trainer;

pub use error::{MpcError, Result};
