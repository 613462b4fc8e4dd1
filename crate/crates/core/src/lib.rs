pub mod blocks;
pub mod cost;
pub mod data;
pub mod dsc;
pub mod error;
pub mod explain;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod reference;
pub mod simmim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Gradients, Graph, Tensor, Var};
