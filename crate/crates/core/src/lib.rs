//! Tensor-Train convolution factorization, exact cost accounting, and the
//! Tensor Yard one-shot layer selection, with a small autodiff CNN engine to
//! train and check it.

pub mod conv;
pub mod cost;
pub mod data;
pub mod decompose;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod tt;
pub mod ttconv;
pub mod verify;
pub mod yard;

pub use error::{Error, Result};
pub use scalar::{Dtype, Real};
pub use tensor::DenseTensor;
