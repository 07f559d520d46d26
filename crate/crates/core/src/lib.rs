pub mod autodiff;
pub mod distill;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod models;
pub mod optim;
pub mod sparse;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
